"""Desk-scale 1D Advection / Burgers datasets and their on-disk format."""
from __future__ import annotations

import json
import math
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

MAGIC = b"VCNF"
VERSION = 1
_HEADER = struct.Struct("<4sIQ")

PDES = ("advection", "burgers")


class DatasetFormatError(ValueError):
    pass


class BadMagicError(DatasetFormatError):
    def __init__(self, found: bytes):
        super().__init__(f"bad magic: expected {MAGIC!r}, found {found!r}")


class TruncatedPayloadError(DatasetFormatError):
    pass


class MetadataShapeError(DatasetFormatError):
    pass


class CFLViolation(ValueError):
    def __init__(self, bound: str, dt: float, limit: float):
        self.bound = bound
        self.dt = dt
        self.limit = limit
        super().__init__(f"{bound} bound violated: dt={dt:.3e} > {limit:.3e}")


# ---------------------------------------------------------------------------
# initial conditions


@dataclass(frozen=True)
class SinusoidalIC:
    """u0(x) = sum_i A_i sin(2 pi n_i x / L + phi_i) on a periodic domain."""

    amplitudes: tuple[float, ...]
    modes: tuple[int, ...]
    phases: tuple[float, ...]
    length: float = 1.0

    def __call__(self, x, shift=0.0) -> np.ndarray:
        """Evaluate at ``x - shift`` (``shift`` may be an array broadcastable to ``x``)."""
        x = np.asarray(x, dtype=np.float64)
        out = np.zeros(np.broadcast_shapes(x.shape, np.shape(shift)))
        k = 2.0 * np.pi / self.length
        for a, n, phi in zip(self.amplitudes, self.modes, self.phases):
            out += a * np.sin(k * n * (x - shift) + phi)
        return out

    def antiderivative(self, x) -> np.ndarray:
        """Integral of u0 from 0 to ``x``."""
        x = np.asarray(x, dtype=np.float64)
        out = np.zeros_like(x)
        k = 2.0 * np.pi / self.length
        for a, n, phi in zip(self.amplitudes, self.modes, self.phases):
            out += a / (k * n) * (np.cos(phi) - np.cos(k * n * x + phi))
        return out

    def to_json(self) -> dict:
        return {"amplitudes": list(self.amplitudes), "modes": list(self.modes),
                "phases": list(self.phases), "length": self.length}


def sample_ic(seed, n_modes: int = 5, max_mode: int = 8,
              amp_range: tuple[float, float] = (-0.5, 0.5),
              length: float = 1.0) -> SinusoidalIC:
    """Draw a random sinusoidal superposition.

    ``seed`` may be an int, a ``SeedSequence`` or a ``Generator``.
    """
    if n_modes < 1:
        raise ValueError("n_modes must be >= 1")
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    amps = rng.uniform(amp_range[0], amp_range[1], n_modes) if amp_range[0] != amp_range[1] \
        else np.full(n_modes, float(amp_range[0]))
    modes = rng.integers(1, max_mode + 1, n_modes)
    phases = rng.uniform(0.0, 2.0 * np.pi, n_modes)
    return SinusoidalIC(tuple(float(a) for a in amps), tuple(int(n) for n in modes),
                        tuple(float(p) for p in phases), float(length))


# ---------------------------------------------------------------------------
# trajectories


def periodic_grid(s: int, length: float = 1.0) -> np.ndarray:
    """Node coordinates ``i L / s`` as an ``[s, 1]`` array."""
    return (np.arange(s, dtype=np.float64) * (length / s))[:, None]


@dataclass
class Trajectory:
    values: np.ndarray  # [N_t, s, c]
    times: np.ndarray   # [N_t]
    grid: np.ndarray    # [s, D]
    params: np.ndarray  # [j]

    def __post_init__(self):
        nt, s, _ = self.values.shape
        if self.times.shape != (nt,) or self.grid.shape[0] != s:
            raise MetadataShapeError(
                f"trajectory values {self.values.shape} vs times {self.times.shape}, grid {self.grid.shape}")
        if self.times[0] != 0.0 or np.any(np.diff(self.times) <= 0):
            raise ValueError("times must start at 0 and increase strictly")


def _check_times(times) -> np.ndarray:
    times = np.asarray(times, dtype=np.float64)
    if times.ndim != 1 or times[0] != 0.0 or np.any(np.diff(times) <= 0):
        raise ValueError("times must be 1-D, start at 0 and increase strictly")
    return times


def solve_advection(ic: SinusoidalIC, beta: float, times, grid: np.ndarray) -> Trajectory:
    """Exact solution u(t, x) = u0(x - beta t), evaluated mode by mode."""
    times = _check_times(times)
    x = grid[:, 0]
    values = ic(x[None, :], shift=beta * times[:, None])
    return Trajectory(values[..., None], times, grid, np.array([beta], dtype=np.float64))


def burgers_dt_limits(u_max: float, nu: float, dx: float) -> dict[str, float]:
    limits = {"advective CFL": 0.4 * dx / u_max if u_max > 0 else math.inf}
    limits["diffusive"] = 0.4 * dx * dx * math.pi / (2.0 * nu) if nu > 0 else math.inf
    return limits


def stable_dt(ic: SinusoidalIC, nu: float, s: int, out_dt: float, safety: float = 0.9) -> float:
    """Largest solver step under both bounds that divides ``out_dt`` evenly."""
    u_max = float(np.sum(np.abs(ic.amplitudes)))
    limit = safety * min(burgers_dt_limits(u_max, nu, ic.length / s).values())
    return out_dt / math.ceil(out_dt / limit)


def _mc_slope(du_left: np.ndarray, du_right: np.ndarray) -> np.ndarray:
    # monotonized-central limiter
    same = du_left * du_right > 0
    mag = np.minimum(np.minimum(2 * np.abs(du_left), 2 * np.abs(du_right)),
                     0.5 * np.abs(du_left + du_right))
    return np.where(same, np.sign(du_left) * mag, 0.0)


def burgers_rhs(u: np.ndarray, nu: float, dx: float) -> np.ndarray:
    """Semi-discrete flux-form right-hand side of u_t + (u^2/2)_x = (nu/pi) u_xx."""
    up, um = np.roll(u, -1), np.roll(u, 1)
    slope = _mc_slope(u - um, up - u)
    left = u + 0.5 * slope                  # state at i+1/2 from cell i
    right = np.roll(u - 0.5 * slope, -1)    # state at i+1/2 from cell i+1
    a = np.maximum(np.abs(left), np.abs(right))
    flux = 0.25 * (left * left + right * right) - 0.5 * a * (right - left)
    flux += -(nu / math.pi) * (up - u) / dx
    return -(flux - np.roll(flux, 1)) / dx


def solve_burgers(ic: SinusoidalIC, nu: float, s: int, dt_solver: float, times) -> Trajectory:
    """Second-order finite-volume solution (MUSCL + Rusanov flux, Heun time stepping)."""
    times = _check_times(times)
    grid = periodic_grid(s, ic.length)
    dx = ic.length / s
    steps = times / dt_solver
    if np.any(np.abs(steps - np.round(steps)) > 1e-6):
        raise ValueError("requested times are not multiples of dt_solver")
    steps = np.round(steps).astype(np.int64)

    u = ic(grid[:, 0])
    out = np.empty((len(times), s))
    out[0] = u
    done = 0
    for k in range(1, len(times)):
        for bound, limit in burgers_dt_limits(float(np.max(np.abs(u))), nu, dx).items():
            if dt_solver > limit:
                raise CFLViolation(bound, dt_solver, limit)
        for _ in range(steps[k] - done):
            u1 = u + dt_solver * burgers_rhs(u, nu, dx)
            u = 0.5 * (u + u1 + dt_solver * burgers_rhs(u1, nu, dx))
        done = steps[k]
        out[k] = u
    return Trajectory(out[..., None], times, grid, np.array([nu], dtype=np.float64))


def cole_hopf_burgers(ic: SinusoidalIC, nu: float, t: float, x: np.ndarray,
                      n_quad: int = 4096, n_modes: int | None = None) -> np.ndarray:
    """Viscous Burgers solution via the Cole-Hopf transform.

    phi0 = exp(-1/(2 nu') int_0^x u0) is expanded in a Fourier series whose
    coefficients come from trapezoidal quadrature, evolved under the heat
    equation, and mapped back with u = -2 nu' phi_x / phi (nu' = nu / pi).
    """
    nu_eff = nu / math.pi
    L = ic.length
    y = np.arange(n_quad) * (L / n_quad)
    phi0 = np.exp(-ic.antiderivative(y) / (2.0 * nu_eff))
    K = n_modes if n_modes is not None else n_quad // 4
    k = np.arange(-K, K + 1)
    wave = 2.0 * np.pi * k / L
    coeff = (np.exp(-1j * np.outer(wave, y)) @ phi0) / n_quad
    coeff *= np.exp(-nu_eff * wave ** 2 * t)
    basis = np.exp(1j * np.outer(np.asarray(x, dtype=np.float64), wave))
    phi = (basis @ coeff).real
    dphi = (basis @ (1j * wave * coeff)).real
    return -2.0 * nu_eff * dphi / phi


# ---------------------------------------------------------------------------
# datasets


@dataclass
class Dataset:
    values: np.ndarray  # float32 [N, N_t, s, c]
    times: np.ndarray   # float64 [N_t]
    params: np.ndarray  # float64 [N, j]
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.values.ndim != 4:
            raise MetadataShapeError(f"values must be [N, N_t, s, c], got {self.values.shape}")
        n, nt = self.values.shape[:2]
        if self.times.shape != (nt,):
            raise MetadataShapeError(f"{nt} frames but {self.times.shape[0]} times")
        if self.params.ndim != 2 or self.params.shape[0] != n:
            raise MetadataShapeError(f"{n} samples but params of shape {self.params.shape}")

    def __len__(self) -> int:
        return self.values.shape[0]

    def __eq__(self, other) -> bool:
        if not isinstance(other, Dataset):
            return NotImplemented
        return (self.values.dtype == other.values.dtype
                and self.values.shape == other.values.shape
                and self.values.tobytes() == other.values.tobytes()
                and self.times.tobytes() == other.times.tobytes()
                and self.params.tobytes() == other.params.tobytes()
                and self.meta == other.meta)

    @property
    def length(self) -> float:
        return float(self.meta.get("length", 1.0))

    @property
    def grid(self) -> np.ndarray:
        return periodic_grid(self.values.shape[2], self.length)

    @property
    def model_grid(self) -> np.ndarray:
        """Grid in model coordinates: ``offset + scale * x / L`` from ``meta["domain_map"]``."""
        dm = self.meta.get("domain_map", {"offset": 0.0, "scale": 1.0})
        return dm["offset"] + dm["scale"] * self.grid / self.length

    @property
    def samples(self) -> list[Trajectory]:
        return [self.trajectory(i) for i in range(len(self))]

    def trajectory(self, i: int) -> Trajectory:
        return Trajectory(self.values[i].astype(np.float64), self.times, self.grid, self.params[i])

    def subset(self, index) -> Dataset:
        index = np.asarray(index)
        meta = dict(self.meta, n=int(index.size))
        return Dataset(self.values[index], self.times, self.params[index], meta)


def generate_dataset(pde: str, n: int, seed: int, s: int = 64, n_t: int = 21, t_final: float = 2.0,
                     params=(0.4,), n_modes: int = 5, max_mode: int = 8,
                     amp_range=(-0.5, 0.5), length: float = 1.0,
                     domain_map=(-1.0, 2.0)) -> Dataset:
    """Generate ``n`` trajectories; sample ``i`` uses ``params[i % len(params)]``."""
    if pde not in PDES:
        raise ValueError(f"unknown pde {pde!r}; expected one of {PDES}")
    times = np.linspace(0.0, t_final, n_t)
    grid = periodic_grid(s, length)
    seqs = np.random.SeedSequence(seed).spawn(n)
    values = np.empty((n, n_t, s, 1), dtype=np.float32)
    plist = np.empty((n, 1))
    dts = []
    for i, ss in enumerate(seqs):
        ic = sample_ic(np.random.default_rng(ss), n_modes, max_mode, amp_range, length)
        p = float(params[i % len(params)])
        if pde == "advection":
            traj = solve_advection(ic, p, times, grid)
        else:
            dt = stable_dt(ic, p, s, times[1] - times[0])
            dts.append(dt)
            traj = solve_burgers(ic, p, s, dt, times)
        values[i] = traj.values.astype(np.float32)
        plist[i, 0] = p
    meta = {
        "pde": pde, "seed": int(seed), "length": float(length),
        "dt": float(times[1] - times[0]), "dx": float(length / s),
        "param_names": ["beta" if pde == "advection" else "nu"],
        "param_set": [float(p) for p in params],
        "ic": {"n_modes": n_modes, "max_mode": max_mode, "amp_range": list(amp_range)},
        "domain_map": {"offset": float(domain_map[0]), "scale": float(domain_map[1])},
    }
    if dts:
        meta["dt_solver_min"] = float(min(dts))
    return Dataset(values, times, plist, meta)


def subsample(d: Dataset, space: int = 1, time: int = 1) -> Dataset:
    """Keep every ``space``-th grid point and every ``time``-th frame."""
    s = d.values.shape[2]
    if s % space:
        raise ValueError(f"spatial stride {space} does not divide s={s}")
    meta = dict(d.meta)
    if "dx" in meta:
        meta["dx"] = meta["dx"] * space
    if "dt" in meta:
        meta["dt"] = meta["dt"] * time
    return Dataset(np.ascontiguousarray(d.values[:, ::time, ::space]), d.times[::time].copy(),
                   d.params.copy(), meta)


def _metadata(d: Dataset) -> dict:
    n, nt, s, c = d.values.shape
    meta = dict(d.meta)
    meta.update({"N": n, "N_t": nt, "s": s, "c": c, "D": 1,
                 "times": [float(t) for t in d.times],
                 "params": [[float(v) for v in row] for row in d.params]})
    return meta


def write_dataset(d: Dataset, path) -> None:
    if d.values.dtype != np.float32:
        raise TypeError("dataset payload must be float32")
    meta = json.dumps(_metadata(d), sort_keys=True).encode("utf-8")
    with open(path, "wb") as f:
        f.write(_HEADER.pack(MAGIC, VERSION, len(meta)))
        f.write(meta)
        f.write(d.values.astype("<f4", copy=False).tobytes(order="C"))


def read_dataset(path) -> Dataset:
    raw = Path(path).read_bytes()
    if len(raw) < 4 or raw[:4] != MAGIC:
        raise BadMagicError(raw[:4])
    if len(raw) < _HEADER.size:
        raise TruncatedPayloadError("file ends inside the header")
    _, version, meta_len = _HEADER.unpack_from(raw)
    if version != VERSION:
        raise DatasetFormatError(f"unsupported dataset version {version}")
    start = _HEADER.size + meta_len
    if len(raw) < start:
        raise TruncatedPayloadError("file ends inside the metadata block")
    meta = json.loads(raw[_HEADER.size:start].decode("utf-8"))
    try:
        n, nt, s, c = (int(meta.pop(k)) for k in ("N", "N_t", "s", "c"))
        meta.pop("D")
        times = np.asarray(meta.pop("times"), dtype=np.float64)
        params = np.asarray(meta.pop("params"), dtype=np.float64)
    except KeyError as e:
        raise MetadataShapeError(f"metadata lacks {e}") from None
    if times.shape != (nt,) or params.shape[:1] != (n,):
        raise MetadataShapeError(
            f"metadata N={n}, N_t={nt} disagree with times {times.shape} / params {params.shape}")
    expected = 4 * n * nt * s * c
    payload = len(raw) - start
    if payload < expected:
        raise TruncatedPayloadError(f"payload has {payload} bytes, expected {expected}")
    if payload > expected:
        raise MetadataShapeError(f"payload has {payload} bytes, metadata implies {expected}")
    values = np.frombuffer(raw, dtype="<f4", offset=start).reshape(n, nt, s, c).astype(np.float32)
    return Dataset(values, times, params.reshape(n, -1), meta)


def regenerate(d: Dataset, s: int | None = None, n_t: int | None = None) -> Dataset:
    """Re-run the generator recorded in ``d.meta`` at a different resolution.

    Same seed and parameters, so the trajectories are the same ones sampled
    on a finer grid or at more frames.
    """
    m = d.meta
    try:
        ic = m["ic"]
        out = generate_dataset(m["pde"], len(d), seed=m["seed"], s=s or d.values.shape[2],
                               n_t=n_t or d.values.shape[1], t_final=float(d.times[-1]),
                               params=tuple(m["param_set"]), n_modes=ic["n_modes"], max_mode=ic["max_mode"],
                               amp_range=tuple(ic["amp_range"]), length=m["length"],
                               domain_map=(m["domain_map"]["offset"], m["domain_map"]["scale"]))
    except KeyError as err:
        raise MetadataShapeError(f"dataset metadata lacks generator field {err}") from None
    out.meta.update({k: v for k, v in m.items() if k not in out.meta})
    return out
