"""Array substrate: checked primitive ops, reverse-mode gradients and a
finite-difference oracle.

Arrays are plain ``torch.Tensor`` values. Every primitive checks its operand
shapes up front (no implicit broadcasting apart from scalar-by-array) and
refuses to hand back non-finite values. Gradients are recorded by torch's
tape; :func:`finite_diff_grad` is an independent central-difference oracle
that never touches the tape.
"""
from __future__ import annotations

import math
import threading
import weakref
from collections.abc import Callable, Mapping, Sequence
from contextlib import contextmanager
from dataclasses import dataclass, field

import numpy as np
import torch
import torch.nn.functional as F

Array = torch.Tensor
Scalar = float | int

LAYER_NORM_EPS = 1e-5


class ShapeError(ValueError):
    """Operand shapes do not conform for ``op``."""

    def __init__(self, op: str, *shapes, detail: str = ""):
        self.op = op
        self.shapes = tuple(tuple(s) for s in shapes)
        shown = " vs ".join(str(list(s)) for s in self.shapes)
        msg = f"{op}: shape mismatch {shown}"
        if detail:
            msg += f" ({detail})"
        super().__init__(msg)


class NonFiniteError(FloatingPointError):
    def __init__(self, op: str, count: int):
        self.op = op
        self.count = count
        super().__init__(f"{op}: produced {count} non-finite value(s)")


# ---------------------------------------------------------------------------
# allocation tracking


class AllocationTracker:
    """Counts live bytes of storages produced by engine ops.

    Views share a storage with their base and are not double counted. Only
    arrays created while the tracker is active are seen.
    """

    def __init__(self):
        self._lock = threading.Lock()
        self._live: dict[int, list[int]] = {}  # data_ptr -> [nbytes, refs]
        self.current = 0
        self.peak = 0

    def _add(self, t: Array) -> None:
        st = t.untyped_storage()
        ptr, nbytes = st.data_ptr(), st.nbytes()
        with self._lock:
            entry = self._live.get(ptr)
            if entry is None:
                self._live[ptr] = [nbytes, 1]
                self.current += nbytes
                self.peak = max(self.peak, self.current)
            else:
                entry[1] += 1
        weakref.finalize(t, self._release, ptr)

    def _release(self, ptr: int) -> None:
        with self._lock:
            entry = self._live.get(ptr)
            if entry is None:
                return
            entry[1] -= 1
            if entry[1] == 0:
                self.current -= entry[0]
                del self._live[ptr]


_tracking = threading.local()


@contextmanager
def track_allocations():
    """Yield an :class:`AllocationTracker` active for this thread."""
    tracker = AllocationTracker()
    prev = getattr(_tracking, "tracker", None)
    _tracking.tracker = tracker
    try:
        yield tracker
    finally:
        _tracking.tracker = prev


def _finish(out: Array, op: str, check: bool = True) -> Array:
    # NaN/Inf propagate through a sum, so one reduction screens the array;
    # the exact count is only taken on failure.
    if check and out.is_floating_point() and not math.isfinite(out.detach().sum().item()):
        bad = int((~torch.isfinite(out)).sum().item())
        if bad:
            raise NonFiniteError(op, bad)
    tracker = getattr(_tracking, "tracker", None)
    if tracker is not None:
        tracker._add(out)
    return out


def _is_scalar(x) -> bool:
    return isinstance(x, (int, float)) or (isinstance(x, Array) and x.dim() == 0)


# ---------------------------------------------------------------------------
# construction


def array(data, dtype: torch.dtype = torch.float64) -> Array:
    if isinstance(data, Array):
        return data.to(dtype)
    return torch.as_tensor(np.asarray(data), dtype=dtype)


# ---------------------------------------------------------------------------
# elementwise


def _binary(op: str, fn, a, b) -> Array:
    if _is_scalar(a) or _is_scalar(b):
        return _finish(fn(a, b), op)
    if a.shape != b.shape:
        raise ShapeError(op, a.shape, b.shape)
    return _finish(fn(a, b), op)


def add(a, b) -> Array:
    return _binary("add", torch.add, a, b)


def sub(a, b) -> Array:
    return _binary("sub", torch.sub, a, b)


def mul(a, b) -> Array:
    """Hadamard product (or scalar scaling)."""
    return _binary("mul", torch.mul, a, b)


def div(a, b) -> Array:
    return _binary("div", torch.div, a, b)


def neg(a: Array) -> Array:
    return _finish(-a, "neg")


def square(a: Array) -> Array:
    return _finish(a * a, "square")


def sqrt(a: Array) -> Array:
    return _finish(torch.sqrt(a), "sqrt")


def absolute(a: Array) -> Array:
    return _finish(torch.abs(a), "abs")


def exp(a: Array) -> Array:
    return _finish(torch.exp(a), "exp")


def sin(a: Array) -> Array:
    return _finish(torch.sin(a), "sin")


def cos(a: Array) -> Array:
    return _finish(torch.cos(a), "cos")


def elu(a: Array) -> Array:
    return _finish(F.elu(a), "elu")


def gelu(a: Array) -> Array:
    return _finish(F.gelu(a), "gelu")


# ---------------------------------------------------------------------------
# linear algebra


def matmul(a: Array, b: Array) -> Array:
    """``a[..., m, k] @ b[k, n]`` or ``a[..., m, k] @ b[..., k, n]``.

    Leading axes of a batched right operand must equal those of ``a``.
    """
    if a.dim() < 2 or b.dim() < 2:
        raise ShapeError("matmul", a.shape, b.shape, detail="operands need rank >= 2")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError("matmul", a.shape, b.shape, detail="inner extents differ")
    if b.dim() > 2 and a.shape[:-2] != b.shape[:-2]:
        raise ShapeError("matmul", a.shape, b.shape, detail="batch extents differ")
    return _finish(torch.matmul(a, b), "matmul")


def affine(x: Array, W: Array, b: Array | None = None) -> Array:
    """``x @ W + b`` with ``b`` added to every row."""
    if W.dim() != 2 or x.shape[-1] != W.shape[0]:
        raise ShapeError("affine", x.shape, W.shape)
    if b is not None and b.shape != (W.shape[1],):
        raise ShapeError("affine", W.shape, b.shape, detail="bias width")
    out = torch.matmul(x, W) if b is None else torch.matmul(x, W) + b
    return _finish(out, "affine")


# ---------------------------------------------------------------------------
# structural


def reshape(a: Array, shape: Sequence[int]) -> Array:
    shape = tuple(int(s) for s in shape)
    if shape.count(-1) == 1:
        known = math.prod(s for s in shape if s != -1)
        if known and a.numel() % known == 0:
            shape = tuple(a.numel() // known if s == -1 else s for s in shape)
    if math.prod(shape) != a.numel() or any(s < 0 for s in shape):
        raise ShapeError("reshape", a.shape, shape)
    return _finish(a.reshape(shape), "reshape", check=False)


def transpose(a: Array, dim0: int = -2, dim1: int = -1) -> Array:
    return _finish(a.transpose(dim0, dim1), "transpose", check=False)


def permute(a: Array, axes: Sequence[int]) -> Array:
    if sorted(x % a.dim() for x in axes) != list(range(a.dim())):
        raise ShapeError("permute", a.shape, tuple(axes), detail="axes are not a permutation")
    return _finish(a.permute(*axes), "permute", check=False)


def broadcast_to(a: Array, shape: Sequence[int]) -> Array:
    """Explicitly repeat size-1 (or missing leading) axes of ``a``."""
    shape = tuple(int(s) for s in shape)
    lead = len(shape) - a.dim()
    if lead < 0 or any(s not in (1, t) for s, t in zip(a.shape, shape[lead:])):
        raise ShapeError("broadcast_to", a.shape, shape)
    return _finish(a.expand(shape), "broadcast_to", check=False)


def concat(arrays: Sequence[Array], axis: int = -1) -> Array:
    if not arrays:
        raise ValueError("concat: no operands")
    rank = arrays[0].dim()
    ax = axis % rank
    ref = list(arrays[0].shape)
    for a in arrays[1:]:
        other = list(a.shape)
        if a.dim() != rank or ref[:ax] + ref[ax + 1:] != other[:ax] + other[ax + 1:]:
            raise ShapeError("concat", arrays[0].shape, a.shape, detail=f"axis {axis}")
    return _finish(torch.cat(list(arrays), dim=ax), "concat", check=False)


def take(a: Array, axis: int, start: int, stop: int | None = None, step: int = 1) -> Array:
    """Slice ``a[start:stop:step]`` along ``axis``."""
    idx = [slice(None)] * a.dim()
    idx[axis] = slice(start, stop, step)
    out = a[tuple(idx)]
    if out.numel() == 0:
        raise ShapeError("take", a.shape, detail=f"empty slice {start}:{stop}:{step} on axis {axis}")
    return _finish(out, "take", check=False)


def gather_rows(a: Array, index: Sequence[int] | Array, axis: int = 0) -> Array:
    index = torch.as_tensor(index, dtype=torch.long)
    return _finish(torch.index_select(a, axis, index), "gather_rows", check=False)


# ---------------------------------------------------------------------------
# reductions and normalisation


def reduce_sum(a: Array, axis: int | Sequence[int] | None = None, keepdim: bool = False) -> Array:
    if axis is None:
        return _finish(a.sum(), "sum")
    return _finish(a.sum(dim=axis, keepdim=keepdim), "sum")


def reduce_mean(a: Array, axis: int | Sequence[int] | None = None, keepdim: bool = False) -> Array:
    if axis is None:
        return _finish(a.mean(), "mean")
    return _finish(a.mean(dim=axis, keepdim=keepdim), "mean")


def layer_norm(x: Array, gain: Array | None = None, bias: Array | None = None,
               eps: float = LAYER_NORM_EPS) -> Array:
    """Normalise over the last axis, then scale by ``gain`` and shift by ``bias``."""
    width = x.shape[-1]
    for name, p in (("gain", gain), ("bias", bias)):
        if p is not None and p.shape != (width,):
            raise ShapeError("layer_norm", x.shape, p.shape, detail=name)
    return _finish(F.layer_norm(x, (width,), gain, bias, eps), "layer_norm")


# ---------------------------------------------------------------------------
# gradients


@dataclass
class DifferentiableGraph:
    """A recorded scalar computation ``fn(leaves)``."""

    fn: Callable[[Mapping[str, Array]], Array]
    leaves: dict[str, Array]
    output: Array = field(repr=False)

    def replay(self) -> Array:
        with torch.no_grad():
            return self.fn(self.leaves)


def record(fn: Callable[[Mapping[str, Array]], Array],
           params: Mapping[str, Array]) -> DifferentiableGraph:
    leaves = {k: v.detach().clone().requires_grad_(True) for k, v in params.items()}
    return DifferentiableGraph(fn, leaves, fn(leaves))


def backward(graph: DifferentiableGraph) -> dict[str, Array]:
    """Gradient of the scalar output with respect to every leaf.

    The graph stays usable: it can be differentiated again or replayed.
    """
    out = graph.output
    if out.numel() != 1 or out.dim() != 0:
        raise ShapeError("backward", out.shape, detail="output must be a scalar")
    names = list(graph.leaves)
    grads = torch.autograd.grad(out, [graph.leaves[n] for n in names],
                                retain_graph=True, allow_unused=True)
    result = {}
    for n, g in zip(names, grads):
        result[n] = torch.zeros_like(graph.leaves[n]) if g is None else g.detach()
    return result


def finite_diff_grad(f: Callable[[Mapping[str, Array]], Array | float],
                     params: Mapping[str, Array],
                     h: float = 1e-5,
                     names: Sequence[str] | None = None) -> dict[str, Array]:
    """Central differences ``(f(x+h) - f(x-h)) / 2h`` for every coordinate."""
    if h <= 0:
        raise ValueError("finite_diff_grad: step must be positive")
    base = {k: v.detach().clone() for k, v in params.items()}
    result = {}
    with torch.no_grad():
        for name in (names if names is not None else list(base)):
            value = base[name]
            flat = value.reshape(-1)
            grad = torch.zeros(flat.numel(), dtype=torch.float64)
            for i in range(flat.numel()):
                orig = flat[i].item()
                flat[i] = orig + h
                plus = float(f(base))
                flat[i] = orig - h
                minus = float(f(base))
                flat[i] = orig
                grad[i] = (plus - minus) / (2 * h)
            result[name] = grad.reshape(value.shape).to(value.dtype)
    return result
