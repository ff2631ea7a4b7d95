"""MSE training with a one-cycle schedule, Adam, randomized starting points
and resumable checkpoints."""
from __future__ import annotations

import csv
import hashlib
import json
import logging
import math
import struct
import time
from collections.abc import Mapping
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import torch

from . import engine as E
from .data import Dataset
from .model import ModelConfig, ParameterStore, forward, init_params

log = logging.getLogger(__name__)

CKPT_MAGIC = b"VCNP"
CKPT_VERSION = 1
_HEADER = struct.Struct("<4sIQ")
_U64 = struct.Struct("<Q")

DTYPES = {"float32": torch.float32, "float64": torch.float64}
LOG_FIELDS = ("epoch", "step", "lr", "loss", "grad_norm", "wall_ms")


class CheckpointError(ValueError):
    pass


class CheckpointVersionError(CheckpointError):
    pass


class TrainingDiverged(FloatingPointError):
    def __init__(self, step: int, lr: float, grad_norm: float, reason: str = "non-finite loss"):
        self.step, self.lr, self.grad_norm = step, lr, grad_norm
        super().__init__(f"{reason} at step {step} (lr={lr:.3e}, grad_norm={grad_norm:.3e})")


@dataclass
class TrainConfig:
    epochs: int = 120
    batch_size: int = 8
    max_lr: float = 3e-3
    pct_peak: float = 0.2
    start_div: float = 1e-3
    final_div: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    clip_grad: float | None = None
    seed: int = 0
    randomized_starts: bool = False
    starts_per_epoch: int = 10
    absolute_times: bool = False
    time_norm: str = "horizon"
    precision: str = "float32"

    def __post_init__(self):
        if not 0.0 < self.pct_peak < 1.0:
            raise ValueError("pct_peak must lie in (0, 1)")
        if self.start_div <= 0 or self.final_div <= 0:
            raise ValueError("schedule divisors must be positive")
        if self.time_norm not in ("horizon", "remaining"):
            raise ValueError("time_norm must be 'horizon' or 'remaining'")
        if self.precision not in DTYPES:
            raise ValueError(f"precision must be one of {sorted(DTYPES)}")

    @property
    def dtype(self) -> torch.dtype:
        return DTYPES[self.precision]


def mse_loss(pred, target):
    """Mean squared error over every axis."""
    if pred.shape != target.shape:
        raise E.ShapeError("mse_loss", pred.shape, target.shape)
    return E.reduce_mean(E.square(E.sub(pred, target)))


def one_cycle_lr(step: int, total_steps: int, cfg: TrainConfig) -> float:
    """Cosine warm-up from ``max_lr*start_div`` to ``max_lr`` at ``pct_peak``,
    then cosine decay to ``max_lr*final_div``."""
    if not 0 <= step <= total_steps:
        raise ValueError(f"step {step} outside [0, {total_steps}]")
    peak = cfg.pct_peak * total_steps
    lo, hi, end = cfg.max_lr * cfg.start_div, cfg.max_lr, cfg.max_lr * cfg.final_div
    if step <= peak:
        frac = step / peak if peak > 0 else 1.0
        return hi + (lo - hi) * 0.5 * (1.0 + math.cos(math.pi * frac))
    frac = (step - peak) / (total_steps - peak)
    return end + (hi - end) * 0.5 * (1.0 + math.cos(math.pi * frac))


def starting_point_schedule(rng: np.random.Generator, n_t: int, k: int = 10) -> list[int]:
    """``[0]`` followed by the first ``k`` entries of a shuffle of ``1..n_t-1``."""
    if n_t < 2:
        raise ValueError("need at least two frames")
    rest = rng.permutation(np.arange(1, n_t))[:k]
    return [0] + [int(i) for i in rest]


def epoch_rng(seed: int, epoch: int) -> np.random.Generator:
    return np.random.default_rng([seed, epoch])


@dataclass
class TrainState:
    params: ParameterStore
    m: dict[str, torch.Tensor]
    v: dict[str, torch.Tensor]
    step: int = 0
    epoch: int = 0

    @classmethod
    def fresh(cls, params: ParameterStore) -> TrainState:
        zeros = {n: torch.zeros_like(params[n]) for n in params.trainable}
        return cls(params, zeros, {n: z.clone() for n, z in zeros.items()})


def query_times(times: np.ndarray, start: int, absolute: bool = False, norm: str = "horizon") -> np.ndarray:
    """Normalised query times for targets after frame ``start``.

    Relative convention: elapsed time since the conditioning frame, divided by
    the full horizon (``norm="horizon"``, the same physical lag always maps to
    the same input) or by the time remaining after the conditioning frame
    (``norm="remaining"``, the window always spans ``(0, 1]``).
    """
    later = times[start + 1:]
    if absolute:
        return later / (times[-1] - times[0])
    if norm == "remaining":
        return (later - times[start]) / (times[-1] - times[start])
    if norm != "horizon":
        raise ValueError(f"unknown time normalisation {norm!r}")
    return (later - times[start]) / (times[-1] - times[0])


def _to_tensor(x, dtype):
    return x.to(dtype) if isinstance(x, torch.Tensor) else torch.as_tensor(np.asarray(x), dtype=dtype)


def train_step(state: TrainState, batch: Mapping, start: int, model_cfg: ModelConfig,
               train_cfg: TrainConfig, total_steps: int) -> tuple[TrainState, float, float]:
    """One Adam update conditioned on frame ``start`` of every trajectory.

    ``batch`` holds ``Y [B, N_t, s, c]``, ``times [N_t]``, ``X [s, D]`` and
    ``p [B, j]``. Returns the new state, the loss and the gradient norm.
    """
    dtype = state.params.dtype
    Y = _to_tensor(batch["Y"], dtype)
    n_t = Y.shape[1]
    if not 0 <= start < n_t - 1:
        raise ValueError(f"start {start} leaves no target frames (N_t={n_t})")
    times = np.asarray(batch["times"], dtype=np.float64)
    t_query = torch.as_tensor(query_times(times, start, train_cfg.absolute_times, train_cfg.time_norm), dtype=dtype)
    X, p = _to_tensor(batch["X"], dtype), _to_tensor(batch["p"], dtype)
    cond = E.take(Y, 1, start, start + 1).reshape(Y.shape[0], *Y.shape[2:])
    target = E.take(Y, 1, start + 1)
    frozen = {n: state.params[n] for n in state.params.frozen}

    def loss_fn(leaves):
        pred = forward(t_query, X, cond, p, {**leaves, **frozen}, model_cfg)
        return mse_loss(pred, target)

    lr = one_cycle_lr(state.step, total_steps, train_cfg)
    trainable = {n: state.params[n] for n in state.params.trainable}
    try:
        graph = E.record(loss_fn, trainable)
    except E.NonFiniteError as err:
        raise TrainingDiverged(state.step, lr, float("nan"), reason=str(err)) from err
    loss = float(graph.output.detach())
    grads = E.backward(graph)
    grad_norm = math.sqrt(sum(float((g.double() ** 2).sum()) for g in grads.values()))
    if not math.isfinite(loss) or not math.isfinite(grad_norm):
        raise TrainingDiverged(state.step, lr, grad_norm)
    if train_cfg.clip_grad is not None and grad_norm > train_cfg.clip_grad:
        scale = train_cfg.clip_grad / grad_norm
        grads = {n: g * scale for n, g in grads.items()}

    b1, b2 = train_cfg.beta1, train_cfg.beta2
    t = state.step + 1
    new_params = state.params.copy()
    m, v = {}, {}
    with torch.no_grad():
        for n, g in grads.items():
            m[n] = b1 * state.m[n] + (1 - b1) * g
            v[n] = b2 * state.v[n] + (1 - b2) * g * g
            m_hat = m[n] / (1 - b1 ** t)
            v_hat = v[n] / (1 - b2 ** t)
            new_params[n] = state.params[n] - lr * m_hat / (torch.sqrt(v_hat) + train_cfg.adam_eps)
    return TrainState(new_params, m, v, t, state.epoch), loss, grad_norm


def epoch_starts(train_cfg: TrainConfig, epoch: int, n_t: int) -> list[int]:
    if not train_cfg.randomized_starts:
        return [0]
    return starting_point_schedule(epoch_rng(train_cfg.seed, epoch), n_t, train_cfg.starts_per_epoch)


def total_steps_for(train_cfg: TrainConfig, n_samples: int, n_t: int) -> int:
    batches = math.ceil(n_samples / train_cfg.batch_size)
    usable = sum(sum(1 for s in epoch_starts(train_cfg, e, n_t) if s < n_t - 1)
                 for e in range(train_cfg.epochs))
    return usable * batches


@dataclass
class TrainResult:
    state: TrainState
    losses: list[float] = field(default_factory=list)
    epoch_losses: list[float] = field(default_factory=list)
    schedules: list[list[int]] = field(default_factory=list)
    conditioning_frames: set[int] = field(default_factory=set)


def train(dataset: Dataset, model_cfg: ModelConfig, train_cfg: TrainConfig,
          state: TrainState | None = None, log_path=None, stop_epoch: int | None = None) -> TrainResult:
    """Run epochs ``state.epoch .. stop_epoch`` (default: all configured epochs)."""
    if state is None:
        state = TrainState.fresh(init_params(model_cfg, train_cfg.dtype))
    Y = torch.as_tensor(dataset.values, dtype=train_cfg.dtype)
    n, n_t = Y.shape[:2]
    X, params_all = dataset.model_grid, dataset.params
    total = total_steps_for(train_cfg, n, n_t)
    stop = train_cfg.epochs if stop_epoch is None else min(stop_epoch, train_cfg.epochs)
    result = TrainResult(state)

    writer = None
    if log_path is not None:
        new_file = not Path(log_path).exists()
        fh = open(log_path, "a", newline="")
        writer = csv.writer(fh)
        if new_file:
            writer.writerow(LOG_FIELDS)
    try:
        for epoch in range(state.epoch, stop):
            starts = epoch_starts(train_cfg, epoch, n_t)
            result.schedules.append(starts)
            rng = np.random.default_rng([train_cfg.seed, epoch, 1])
            epoch_loss, count = 0.0, 0
            for start in starts:
                if start >= n_t - 1:
                    log.debug("epoch %d: starting point %d has no targets, skipped", epoch, start)
                    continue
                result.conditioning_frames.add(start)
                order = rng.permutation(n)
                for b in range(0, n, train_cfg.batch_size):
                    idx = torch.as_tensor(np.sort(order[b:b + train_cfg.batch_size]))
                    batch = {"Y": Y[idx], "times": dataset.times, "X": X, "p": params_all[idx.numpy()]}
                    tic = time.perf_counter()
                    lr = one_cycle_lr(state.step, total, train_cfg)
                    state, loss, gnorm = train_step(state, batch, start, model_cfg, train_cfg, total)
                    wall = 1000.0 * (time.perf_counter() - tic)
                    result.losses.append(loss)
                    epoch_loss += loss
                    count += 1
                    if writer is not None:
                        writer.writerow([epoch, state.step, repr(lr), repr(loss), repr(gnorm), f"{wall:.1f}"])
            state.epoch = epoch + 1
            result.epoch_losses.append(epoch_loss / max(count, 1))
            log.info("epoch %d loss %.4e", epoch, result.epoch_losses[-1])
    finally:
        if writer is not None:
            fh.close()
    result.state = state
    return result


# ---------------------------------------------------------------------------
# checkpoints


def config_hash(payload: Mapping) -> str:
    return hashlib.sha256(json.dumps(payload, sort_keys=True).encode()).hexdigest()[:16]


def save_checkpoint(state: TrainState, path, model_cfg: ModelConfig, train_cfg: TrainConfig | None = None,
                    meta: Mapping | None = None) -> None:
    """Write parameters and optimizer moments.

    The payload precision follows the parameters so 64-bit runs resume exactly.
    """
    dtype = state.params.dtype
    dname = "float64" if dtype == torch.float64 else "float32"
    records = [(n, state.params[n]) for n in state.params]
    records += [(f"adam.m/{n}", t) for n, t in state.m.items()]
    records += [(f"adam.v/{n}", t) for n, t in state.v.items()]
    header = {
        "model": model_cfg.to_dict(),
        "train": asdict(train_cfg) if train_cfg is not None else None,
        "step": state.step, "epoch": state.epoch,
        "payload_dtype": dname,
        "frozen": sorted(state.params.frozen),
        "n_params": len(state.params),
        "meta": dict(meta or {}),
    }
    blob = json.dumps(header, sort_keys=True).encode("utf-8")
    np_dtype = "<f8" if dname == "float64" else "<f4"
    with open(path, "wb") as f:
        f.write(_HEADER.pack(CKPT_MAGIC, CKPT_VERSION, len(blob)))
        f.write(blob)
        f.write(_U64.pack(len(records)))
        for name, t in records:
            raw = name.encode("utf-8")
            f.write(_U64.pack(len(raw)))
            f.write(raw)
            f.write(_U64.pack(t.dim()))
            for extent in t.shape:
                f.write(_U64.pack(extent))
            arr = t.detach().cpu().numpy().astype(np_dtype, copy=False)
            f.write(_U64.pack(arr.nbytes))
            f.write(arr.tobytes(order="C"))


@dataclass
class Checkpoint:
    state: TrainState
    model_cfg: ModelConfig
    train_cfg: TrainConfig | None
    meta: dict


def load_checkpoint(path) -> Checkpoint:
    raw = Path(path).read_bytes()
    if raw[:4] != CKPT_MAGIC:
        raise CheckpointError(f"bad magic {raw[:4]!r}")
    _, version, blen = _HEADER.unpack_from(raw)
    if version != CKPT_VERSION:
        raise CheckpointVersionError(f"checkpoint version {version}, expected {CKPT_VERSION}")
    pos = _HEADER.size
    header = json.loads(raw[pos:pos + blen].decode("utf-8"))
    pos += blen
    dtype = DTYPES[header["payload_dtype"]]
    itemsize = 8 if dtype == torch.float64 else 4

    def u64():
        nonlocal pos
        if pos + 8 > len(raw):
            raise CheckpointError("checkpoint truncated")
        (val,) = _U64.unpack_from(raw, pos)
        pos += 8
        return val

    tensors = {}
    for _ in range(u64()):
        nlen = u64()
        name = raw[pos:pos + nlen].decode("utf-8")
        pos += nlen
        shape = tuple(u64() for _ in range(u64()))
        nbytes = u64()
        if nbytes != itemsize * math.prod(shape):
            raise CheckpointError(f"record {name!r}: payload length {nbytes} does not match shape {shape}")
        if pos + nbytes > len(raw):
            raise CheckpointError(f"record {name!r}: payload truncated")
        arr = np.frombuffer(raw, dtype="<f8" if itemsize == 8 else "<f4", count=math.prod(shape), offset=pos)
        tensors[name] = torch.as_tensor(arr.reshape(shape).copy(), dtype=dtype)
        pos += nbytes
    if pos != len(raw):
        raise CheckpointError(f"{len(raw) - pos} trailing bytes after last record")

    model_cfg = ModelConfig.from_dict(header["model"])
    train_cfg = TrainConfig(**header["train"]) if header.get("train") else None
    frozen = set(header.get("frozen", []))
    params = ParameterStore()
    m, v = {}, {}
    for name, t in tensors.items():
        if name.startswith("adam.m/"):
            m[name[7:]] = t
        elif name.startswith("adam.v/"):
            v[name[7:]] = t
        else:
            params.register(name, t, name not in frozen)
    if len(params) != header["n_params"]:
        raise CheckpointError("parameter record count disagrees with header")
    state = TrainState(params, m, v, header["step"], header["epoch"])
    return Checkpoint(state, model_cfg, train_cfg, header.get("meta", {}))
