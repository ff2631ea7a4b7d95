"""Vectorized conditional neural field for 1D and 2D time-dependent PDEs.

The network is written as plain functions over a parameter mapping so the
same code serves inference, autodiff and finite-difference checks. Shapes:

* ``X``     -- query grid, ``[s, D]``
* ``u0``    -- conditioning frame, ``[B, s, c]``
* ``p``     -- PDE parameters, ``[B, j]``
* ``times`` -- normalised query times, ``[T]``

Latents carry leading axes ``[B]`` (IC only) or ``[B, T]`` (after the first
modulation block) in front of ``[tokens, d]``.
"""
from __future__ import annotations

import math
from collections.abc import Iterator, Mapping
from dataclasses import asdict, dataclass, field

import numpy as np
import torch

from . import engine as E
from .engine import Array, ShapeError


@dataclass
class ModelConfig:
    dim: int = 1
    d: int = 64
    heads: int = 4
    n_enc: int = 2
    n_mod: int = 2
    c: int = 1
    j: int = 1
    mlp_ratio: int = 2
    # 2D only
    p_small: int = 4
    p_large: int = 16
    lff_dim: int = 16
    lff_trainable: bool = True
    # ablations
    use_attention: bool = True
    shift_in_film: bool = False
    multiscale: bool = True
    attn_eps: float | None = None
    seed: int = 0

    def __post_init__(self):
        if self.d % self.heads:
            raise ValueError(f"d={self.d} is not divisible by heads={self.heads}")
        if self.n_enc < 0 or self.n_mod < 1:
            raise ValueError("need n_enc >= 0 and n_mod >= 1")
        if self.dim not in (1, 2):
            raise ValueError("only 1D and 2D fields are supported")
        if self.dim == 2:
            if self.p_large % self.p_small:
                raise ValueError("p_large must be a multiple of p_small")
            if self.lff_dim % 2:
                raise ValueError("lff_dim must be even")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: Mapping) -> ModelConfig:
        return cls(**data)


class ParameterStore(Mapping):
    """Named parameter arrays with a fixed registration order."""

    def __init__(self):
        self._arrays: dict[str, Array] = {}
        self.frozen: set[str] = set()

    def register(self, name: str, value: Array, trainable: bool = True) -> None:
        if name in self._arrays:
            raise KeyError(f"parameter {name!r} registered twice")
        self._arrays[name] = value
        if not trainable:
            self.frozen.add(name)

    def __getitem__(self, name: str) -> Array:
        return self._arrays[name]

    def __setitem__(self, name: str, value: Array) -> None:
        if name not in self._arrays:
            raise KeyError(name)
        if value.shape != self._arrays[name].shape:
            raise ShapeError("ParameterStore", self._arrays[name].shape, value.shape, detail=name)
        self._arrays[name] = value

    def __iter__(self) -> Iterator[str]:
        return iter(self._arrays)

    def __len__(self) -> int:
        return len(self._arrays)

    @property
    def trainable(self) -> list[str]:
        return [n for n in self._arrays if n not in self.frozen]

    def count(self, trainable_only: bool = True) -> int:
        names = self.trainable if trainable_only else list(self)
        return sum(self._arrays[n].numel() for n in names)

    def copy(self, dtype: torch.dtype | None = None) -> ParameterStore:
        out = ParameterStore()
        for n, v in self._arrays.items():
            v = v.detach().clone()
            out.register(n, v if dtype is None else v.to(dtype), n not in self.frozen)
        return out

    def with_values(self, values: Mapping[str, Array]) -> ParameterStore:
        out = self.copy()
        for n, v in values.items():
            out[n] = v
        return out

    @property
    def dtype(self) -> torch.dtype:
        return next(iter(self._arrays.values())).dtype


# ---------------------------------------------------------------------------
# initialisation


def init_params(cfg: ModelConfig, dtype: torch.dtype = torch.float32) -> ParameterStore:
    """Uniform fan-in initialisation for matrices, zero biases, unit norm gains."""
    rng = np.random.default_rng(cfg.seed)
    store = ParameterStore()
    d, hidden = cfg.d, cfg.mlp_ratio * cfg.d

    def linear(name, fan_in, fan_out, trainable=True):
        bound = 1.0 / math.sqrt(fan_in)
        store.register(f"{name}.W", torch.as_tensor(rng.uniform(-bound, bound, (fan_in, fan_out)), dtype=dtype), trainable)
        store.register(f"{name}.b", torch.zeros(fan_out, dtype=dtype), trainable)

    def norm(name):
        store.register(f"{name}.g", torch.ones(d, dtype=dtype))
        store.register(f"{name}.b", torch.zeros(d, dtype=dtype))

    def attention(name):
        for part in ("q", "k", "v", "o"):
            linear(f"{name}.{part}", d, d)

    def mlp(name, width_in, width_hidden, width_out):
        linear(f"{name}.fc1", width_in, width_hidden)
        linear(f"{name}.fc2", width_hidden, width_out)

    if cfg.dim == 1:
        linear("coord", 1 + cfg.dim, d)
        linear("ic", cfg.c + cfg.dim + cfg.j, d)
    else:
        half = cfg.lff_dim // 2
        store.register("lff.Wr", torch.as_tensor(rng.normal(0.0, 2.0 * math.pi, (cfg.dim, half)), dtype=dtype),
                       cfg.lff_trainable)
        mlp("lff.mlp", cfg.lff_dim, cfg.lff_dim, cfg.lff_dim)
        sub = (cfg.p_large // cfg.p_small) ** 2
        for scale, p, coord_pts in (("small", cfg.p_small, cfg.p_small ** 2), ("large", cfg.p_large, sub)):
            if scale == "small" and not cfg.multiscale:
                continue
            linear(f"coord_{scale}", d + coord_pts * cfg.lff_dim, d)
            linear(f"ic_{scale}", p * p * (cfg.c + cfg.dim) + cfg.j, d)

    for i in range(cfg.n_enc):
        attention(f"enc{i}.attn")
        norm(f"enc{i}.ln1")
        mlp(f"enc{i}.mlp", d, hidden, d)
        norm(f"enc{i}.ln2")

    for i in range(cfg.n_mod):
        if cfg.use_attention:
            attention(f"mod{i}.attn")
        norm(f"mod{i}.ln1")
        mlp(f"mod{i}.cond", d, d, d)
        if cfg.shift_in_film:
            mlp(f"mod{i}.shift", d, d, d)
        mlp(f"mod{i}.mlp", d, hidden, d)
        norm(f"mod{i}.ln2")

    if cfg.dim == 1:
        mlp("dec", d, d, cfg.c)
    else:
        for scale, p in (("small", cfg.p_small), ("large", cfg.p_large)):
            if scale == "small" and not cfg.multiscale:
                continue
            linear(f"dec_{scale}", d, p * p * cfg.c)
        if cfg.multiscale:
            store.register("mix.logits", torch.zeros(2, dtype=dtype))
    return store


# ---------------------------------------------------------------------------
# building blocks


def _linear(x: Array, params: Mapping[str, Array], name: str) -> Array:
    return E.affine(x, params[f"{name}.W"], params[f"{name}.b"])


def _mlp(x: Array, params: Mapping[str, Array], name: str) -> Array:
    return _linear(E.gelu(_linear(x, params, f"{name}.fc1")), params, f"{name}.fc2")


def _norm(x: Array, params: Mapping[str, Array], name: str) -> Array:
    return E.layer_norm(x, params[f"{name}.g"], params[f"{name}.b"])


def feature_map(x: Array) -> Array:
    """ELU(x) + 1, strictly positive."""
    return E.add(E.elu(x), 1.0)


def _default_eps(dtype: torch.dtype) -> float:
    return 0.0 if dtype == torch.float64 else 1e-6


def linear_attention(Q: Array, K: Array, V: Array, eps: float | None = None) -> Array:
    """Kernelised attention evaluated right-associated in O(n d_h^2).

    ``phi(Q) (phi(K)^T V) / (phi(Q) phi(K)^T 1 + eps)`` over the last two axes;
    any leading axes are batch axes.
    """
    if Q.shape != K.shape or K.shape[:-1] != V.shape[:-1]:
        raise ShapeError("linear_attention", Q.shape, K.shape, V.shape)
    eps = _default_eps(Q.dtype) if eps is None else eps
    fq, fk = feature_map(Q), feature_map(K)
    kv = E.matmul(E.transpose(fk), V)                              # [..., dh, dv]
    numerator = E.matmul(fq, kv)                                   # [..., n, dv]
    k_sum = E.transpose(E.reduce_sum(fk, axis=-2, keepdim=True))   # [..., dh, 1]
    denom = E.add(E.matmul(fq, k_sum), eps)                        # [..., n, 1]
    return E.div(numerator, E.broadcast_to(denom, numerator.shape))


def attention_weights(Q: Array, K: Array) -> Array:
    """Explicit ``[n, n]`` kernel matrix ``phi(Q_i)^T phi(K_l)`` (quadratic)."""
    return E.matmul(feature_map(Q), E.transpose(feature_map(K)))


def quadratic_attention(Q: Array, K: Array, V: Array, eps: float | None = None) -> Array:
    """Left-associated O(n^2) evaluation of the same kernel attention."""
    eps = _default_eps(Q.dtype) if eps is None else eps
    A = attention_weights(Q, K)
    numerator = E.matmul(A, V)
    denom = E.add(E.reduce_sum(A, axis=-1, keepdim=True), eps)
    return E.div(numerator, E.broadcast_to(denom, numerator.shape))


def _split_heads(x: Array, heads: int) -> Array:
    *lead, n, d = x.shape
    x = E.reshape(x, (*lead, n, heads, d // heads))
    return E.transpose(x, -3, -2)


def _merge_heads(x: Array) -> Array:
    *lead, h, n, dh = x.shape
    return E.reshape(E.transpose(x, -3, -2), (*lead, n, h * dh))


def self_attention(Z: Array, params: Mapping[str, Array], name: str, cfg: ModelConfig) -> Array:
    """Multi-head linear self-attention with an output projection."""
    q, k, v = (_split_heads(_linear(Z, params, f"{name}.{part}"), cfg.heads) for part in "qkv")
    out = linear_attention(q, k, v, cfg.attn_eps)
    return _linear(_merge_heads(out), params, f"{name}.o")


def transformer_block(Z: Array, params: Mapping[str, Array], index: int, cfg: ModelConfig) -> Array:
    name = f"enc{index}"
    h = _norm(E.add(Z, self_attention(Z, params, f"{name}.attn", cfg)), params, f"{name}.ln1")
    return _norm(E.add(h, _mlp(h, params, f"{name}.mlp")), params, f"{name}.ln2")


def modulation_block(C: Array, Z: Array, params: Mapping[str, Array], index: int, cfg: ModelConfig,
                     *, cond_fn=None, mlp_fn=None) -> Array:
    """Attention over the IC latent, then FiLM scaling by the coordinate latent.

    ``Z`` may lack the time axis of ``C``; the attention step then runs once
    and its result is repeated over query times. ``cond_fn``/``mlp_fn``
    replace the conditioning and output MLPs (used to probe the block).
    """
    name = f"mod{index}"
    if Z.shape[-1] != C.shape[-1] or Z.shape[-2] != C.shape[-2]:
        raise ShapeError("modulation_block", C.shape, Z.shape)
    attn = self_attention(Z, params, f"{name}.attn", cfg) if cfg.use_attention else Z
    h1 = _norm(E.add(Z, attn), params, f"{name}.ln1")
    if h1.dim() == C.dim() - 1:
        h1 = E.broadcast_to(E.reshape(h1, (*h1.shape[:-2], 1, *h1.shape[-2:])), C.shape)
    elif h1.shape != C.shape:
        raise ShapeError("modulation_block", C.shape, Z.shape)
    g = cond_fn(C) if cond_fn is not None else _mlp(C, params, f"{name}.cond")
    h2 = E.mul(feature_map(h1), g)
    if cfg.shift_in_film:
        h2 = E.add(h2, _mlp(C, params, f"{name}.shift"))
    out = mlp_fn(h2) if mlp_fn is not None else _mlp(h2, params, f"{name}.mlp")
    return _norm(E.add(h1, out), params, f"{name}.ln2")


# ---------------------------------------------------------------------------
# 1D encoders / decoder


def encode_coords_1d(t: Array, X: Array, params: Mapping[str, Array]) -> Array:
    """Row ``i`` is ``(t || x_i) W + b``; ``t`` of shape ``[T]`` gives ``[T, s, d]``."""
    scalar = t.dim() == 0
    t = E.reshape(t, (-1,)) if not scalar else E.reshape(t, (1,))
    nt, (s, D) = t.shape[0], X.shape
    tt = E.broadcast_to(E.reshape(t, (nt, 1, 1)), (nt, s, 1))
    xx = E.broadcast_to(X, (nt, s, D))
    C = _linear(E.concat([tt, xx], axis=-1), params, "coord")
    return E.reshape(C, C.shape[1:]) if scalar else C


def encode_ic_1d(u0: Array, X: Array, p: Array, params: Mapping[str, Array]) -> Array:
    """Pointwise ``(u(x_i) || x_i || p) W + b`` for ``u0 [B, s, c]``, ``p [B, j]``."""
    B, s, _ = u0.shape
    if X.shape[0] != s:
        raise ShapeError("encode_ic_1d", u0.shape, X.shape, detail="grid rows")
    xx = E.broadcast_to(X, (B, s, X.shape[1]))
    pp = E.broadcast_to(E.reshape(p, (B, 1, p.shape[-1])), (B, s, p.shape[-1]))
    return _linear(E.concat([u0, xx, pp], axis=-1), params, "ic")


def decode_1d(Z: Array, params: Mapping[str, Array]) -> Array:
    return _mlp(Z, params, "dec")


# ---------------------------------------------------------------------------
# 2D encoders / decoder


def positional_encode_time(t: Array, d: int) -> Array:
    """Sinusoidal encoding of continuous ``t``: slot ``2i`` is ``sin(t w_i)``,
    slot ``2i+1`` is ``cos(t w_i)`` with ``w_i = 10000^(-2i/d)``."""
    if d % 2:
        raise ValueError("positional encoding width must be even")
    scalar = t.dim() == 0
    t = E.reshape(t, (-1, 1))
    freq = torch.pow(10000.0, -torch.arange(0, d, 2, dtype=t.dtype) / d).reshape(1, -1)
    arg = E.matmul(t, freq)
    half = arg.shape
    pe = E.concat([E.reshape(E.sin(arg), (*half, 1)), E.reshape(E.cos(arg), (*half, 1))], axis=-1)
    pe = E.reshape(pe, (t.shape[0], d))
    return E.reshape(pe, (d,)) if scalar else pe


def fourier_features(X: Array, Wr: Array) -> Array:
    """``(cos(x W_r) || sin(x W_r)) / sqrt(width)`` before the MLP."""
    if X.shape[-1] != Wr.shape[0]:
        raise ShapeError("fourier_features", X.shape, Wr.shape)
    proj = E.matmul(X, Wr)
    width = 2 * Wr.shape[1]
    return E.mul(E.concat([E.cos(proj), E.sin(proj)], axis=-1), 1.0 / math.sqrt(width))


def learnable_fourier_features(X: Array, params: Mapping[str, Array]) -> Array:
    return _mlp(fourier_features(X, params["lff.Wr"]), params, "lff.mlp")


def _check_patches(grid_shape, p: int, op: str) -> None:
    sx, sy = grid_shape
    if sx % p or sy % p:
        raise ShapeError(op, (sx, sy), detail=f"extents not divisible by patch size {p}")


def patchify(a: Array, grid_shape, p: int) -> Array:
    """``[..., sx*sy, w] -> [..., (sx/p)*(sy/p), p*p*w]``, patches row-major."""
    _check_patches(grid_shape, p, "patchify")
    sx, sy = grid_shape
    *lead, s, w = a.shape
    if s != sx * sy:
        raise ShapeError("patchify", a.shape, (sx, sy))
    L = len(lead)
    a = E.reshape(a, (*lead, sx // p, p, sy // p, p, w))
    a = E.permute(a, (*range(L), L, L + 2, L + 1, L + 3, L + 4))
    return E.reshape(a, (*lead, (sx // p) * (sy // p), p * p * w))


def unpatchify(a: Array, grid_shape, p: int) -> Array:
    """Inverse of :func:`patchify`."""
    _check_patches(grid_shape, p, "unpatchify")
    sx, sy = grid_shape
    *lead, n, pw = a.shape
    w = pw // (p * p)
    if n != (sx // p) * (sy // p) or pw != p * p * w:
        raise ShapeError("unpatchify", a.shape, (sx, sy), detail=f"patch {p}")
    L = len(lead)
    a = E.reshape(a, (*lead, sx // p, sy // p, p, p, w))
    a = E.permute(a, (*range(L), L, L + 2, L + 1, L + 3, L + 4))
    return E.reshape(a, (*lead, sx * sy, w))


def token_count_2d(grid_shape, cfg: ModelConfig) -> int:
    sx, sy = grid_shape
    n_large = sx * sy // cfg.p_large ** 2
    return n_large + (sx * sy // cfg.p_small ** 2 if cfg.multiscale else 0)


def _coordinate_payloads(X: Array, params, cfg: ModelConfig, grid_shape) -> dict[str, Array]:
    """Per-scale concatenated LFFs (t-independent). Large patches use LFFs
    mean-pooled over small-patch cells, so both scales see the same number
    of LFF slots."""
    lff = learnable_fourier_features(X, params)                       # [s, f]
    cells = patchify(lff, grid_shape, cfg.p_small)                    # [nS, pS*pS*f]
    out = {}
    if cfg.multiscale:
        out["small"] = cells
    nS = cells.shape[0]
    pooled = E.reduce_mean(E.reshape(cells, (nS, cfg.p_small ** 2, cfg.lff_dim)), axis=1)
    coarse = (grid_shape[0] // cfg.p_small, grid_shape[1] // cfg.p_small)
    out["large"] = patchify(pooled, coarse, cfg.p_large // cfg.p_small)
    return out


def encode_coords_2d(t: Array, X: Array, params: Mapping[str, Array], cfg: ModelConfig,
                     grid_shape) -> Array:
    """Tokens ``PE(t) || LFF(patch points)`` projected per scale; small patches first."""
    for p in (cfg.p_small, cfg.p_large):
        _check_patches(grid_shape, p, "encode_coords_2d")
    scalar = t.dim() == 0
    t = E.reshape(t, (-1,))
    pe = positional_encode_time(t, cfg.d)                             # [T, d]
    nt = t.shape[0]
    tokens = []
    for scale, payload in _coordinate_payloads(X, params, cfg, grid_shape).items():
        n, w = payload.shape
        both = E.concat([E.broadcast_to(E.reshape(pe, (nt, 1, cfg.d)), (nt, n, cfg.d)),
                         E.broadcast_to(payload, (nt, n, w))], axis=-1)
        tokens.append(_linear(both, params, f"coord_{scale}"))
    C = tokens[0] if len(tokens) == 1 else E.concat(tokens, axis=-2)
    return E.reshape(C, C.shape[1:]) if scalar else C


def encode_ic_2d(u0: Array, X: Array, p: Array, params: Mapping[str, Array], cfg: ModelConfig,
                 grid_shape) -> Array:
    """Strided patch projections of ``(u || x)`` plus ``p``; small branch first."""
    B, s, _ = u0.shape
    if X.shape[0] != s:
        raise ShapeError("encode_ic_2d", u0.shape, X.shape, detail="grid rows")
    field_ = E.concat([u0, E.broadcast_to(X, (B, s, X.shape[1]))], axis=-1)
    tokens = []
    scales = (("small", cfg.p_small), ("large", cfg.p_large)) if cfg.multiscale else (("large", cfg.p_large),)
    for scale, ps in scales:
        patches = patchify(field_, grid_shape, ps)
        n = patches.shape[1]
        pp = E.broadcast_to(E.reshape(p, (B, 1, p.shape[-1])), (B, n, p.shape[-1]))
        tokens.append(_linear(E.concat([patches, pp], axis=-1), params, f"ic_{scale}"))
    return tokens[0] if len(tokens) == 1 else E.concat(tokens, axis=-2)


def mix_weights(params: Mapping[str, Array]) -> Array:
    """Two non-negative weights summing to one (softmax of the mix logits)."""
    e = E.exp(E.sub(params["mix.logits"], E.broadcast_to(torch.max(params["mix.logits"]).detach(), (2,))))
    return E.div(e, E.broadcast_to(E.reduce_sum(e), (2,)))


def decode_2d(Z: Array, params: Mapping[str, Array], cfg: ModelConfig, grid_shape,
              weights: Array | None = None) -> Array:
    """Per-branch transposed patch projections, blended by the mix weights."""
    sx, sy = grid_shape
    n_small = sx * sy // cfg.p_small ** 2 if cfg.multiscale else 0
    n_large = sx * sy // cfg.p_large ** 2
    if Z.shape[-2] != n_small + n_large:
        raise ShapeError("decode_2d", Z.shape, (n_small + n_large, cfg.d), detail="token layout")
    large = unpatchify(_linear(E.take(Z, -2, n_small), params, "dec_large"), grid_shape, cfg.p_large)
    if not cfg.multiscale:
        return large
    small = unpatchify(_linear(E.take(Z, -2, 0, n_small), params, "dec_small"), grid_shape, cfg.p_small)
    w = mix_weights(params) if weights is None else weights
    w_small, w_large = E.reshape(E.take(w, 0, 0, 1), ()), E.reshape(E.take(w, 0, 1, 2), ())
    return E.add(E.mul(small, w_small), E.mul(large, w_large))


# ---------------------------------------------------------------------------
# full model


def _as(x, dtype) -> Array:
    return x.to(dtype) if isinstance(x, Array) else torch.as_tensor(np.asarray(x), dtype=dtype)


def encode_ic(u0: Array, X: Array, p: Array, params, cfg: ModelConfig, grid_shape=None) -> Array:
    """IC latent after the transformer encoder; independent of query time."""
    if cfg.dim == 1:
        Z = encode_ic_1d(u0, X, p, params)
    else:
        Z = encode_ic_2d(u0, X, p, params, cfg, grid_shape)
    for i in range(cfg.n_enc):
        Z = transformer_block(Z, params, i, cfg)
    return Z


def _coords(times: Array, X: Array, params, cfg: ModelConfig, grid_shape) -> Array:
    if cfg.dim == 1:
        return encode_coords_1d(times, X, params)
    return encode_coords_2d(times, X, params, cfg, grid_shape)


def _decode(Z: Array, params, cfg: ModelConfig, grid_shape) -> Array:
    return decode_1d(Z, params) if cfg.dim == 1 else decode_2d(Z, params, cfg, grid_shape)


def _query(times: Array, X: Array, Z: Array, params, cfg: ModelConfig, grid_shape) -> Array:
    C = _coords(times, X, params, cfg, grid_shape)                   # [T, n, d]
    B = Z.shape[0]
    C = E.broadcast_to(C, (B, *C.shape))
    H = Z
    for i in range(cfg.n_mod):
        H = modulation_block(C, H, params, i, cfg)
    return _decode(H, params, cfg, grid_shape)                        # [B, T, s, c]


def forward(times, X, u0, p, params: Mapping[str, Array], cfg: ModelConfig,
            mode: str = "parallel", grid_shape=None) -> Array:
    """Predict the field at every query time.

    ``u0`` of shape ``[s, c]`` (with ``p [j]``) yields ``[T, s, c]``; a
    batched ``u0 [B, s, c]`` yields ``[B, T, s, c]``. ``mode="sequential"``
    evaluates one query time per pass and gives the same values.
    """
    dtype = next(iter(params.values())).dtype
    times = _as(times, dtype).reshape(-1)
    if times.numel() == 0:
        raise ValueError("forward: no query times")
    X, u0, p = _as(X, dtype), _as(u0, dtype), _as(p, dtype)
    single = u0.dim() == 2
    if single:
        u0, p = u0.reshape(1, *u0.shape), p.reshape(1, -1)
    if cfg.dim == 2 and grid_shape is None:
        side = math.isqrt(X.shape[0])
        grid_shape = (side, side)
    Z = encode_ic(u0, X, p, params, cfg, grid_shape)

    if mode == "parallel":
        out = _query(times, X, Z, params, cfg, grid_shape)
    elif mode == "sequential":
        needs_grad = torch.is_grad_enabled() and any(v.requires_grad for v in params.values())
        steps = (_query(E.take(times, 0, k, k + 1), X, Z, params, cfg, grid_shape)
                 for k in range(times.shape[0]))
        if needs_grad:
            out = E.concat(list(steps), axis=1)
        else:
            out = None
            for k, step in enumerate(steps):
                if out is None:
                    out = torch.empty((step.shape[0], times.shape[0], *step.shape[2:]), dtype=dtype)
                out[:, k] = step[:, 0]
    else:
        raise ValueError(f"unknown mode {mode!r}")
    return out[0] if single else out


@dataclass
class VCNeF:
    """Configuration plus parameters, with a convenience prediction method."""

    cfg: ModelConfig
    params: ParameterStore = field(default=None)
    time_scale: float = 1.0

    def __post_init__(self):
        if self.params is None:
            self.params = init_params(self.cfg)

    def predict(self, times, X, u0, p, mode: str = "parallel", grid_shape=None) -> np.ndarray:
        """Query physical ``times`` (divided by ``time_scale`` before encoding)."""
        t = np.asarray(times, dtype=np.float64) / self.time_scale
        with torch.no_grad():
            out = forward(t, X, u0, p, self.params, self.cfg, mode=mode, grid_shape=grid_shape)
        return out.double().numpy()
