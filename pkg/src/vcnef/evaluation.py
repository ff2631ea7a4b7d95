"""Metrics, super-resolution protocols, a persistence baseline and rollout
timing."""
from __future__ import annotations

import csv
import json
import statistics
import time
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from . import engine as E
from .data import Dataset
from .model import VCNeF, forward


class BenchmarkMismatch(RuntimeError):
    pass


# ---------------------------------------------------------------------------
# metrics (per sample: Y and Yhat are [N_t, s, c])


def nrmse(Y, Yhat) -> float:
    """Mean over (t, channel) of ||Y - Yhat||_2 / ||Y||_2 along space.

    Slices whose ground-truth norm is zero are left out and counted in a
    warning.
    """
    Y, Yhat = np.asarray(Y, dtype=np.float64), np.asarray(Yhat, dtype=np.float64)
    if Y.shape != Yhat.shape:
        raise ValueError(f"nrmse: shapes {Y.shape} and {Yhat.shape} differ")
    ref = np.linalg.norm(Y, axis=1)
    err = np.linalg.norm(Y - Yhat, axis=1)
    ok = ref > 0
    skipped = int(ok.size - ok.sum())
    if skipped:
        warnings.warn(f"nrmse: {skipped} zero-norm slice(s) excluded", RuntimeWarning, stacklevel=2)
    if not ok.any():
        return float("nan")
    return float(np.mean(err[ok] / ref[ok]))


def brmse(Y, Yhat) -> float:
    """Mean over (t, channel) of the RMS error at the first and last grid point."""
    Y, Yhat = np.asarray(Y, dtype=np.float64), np.asarray(Yhat, dtype=np.float64)
    if Y.shape != Yhat.shape or Y.shape[1] < 2:
        raise ValueError(f"brmse: need matching shapes with s >= 2, got {Y.shape} / {Yhat.shape}")
    d = Y - Yhat
    return float(np.mean(np.sqrt((d[:, 0] ** 2 + d[:, -1] ** 2) / 2.0)))


def error_heatmap(Y, Yhat) -> np.ndarray:
    """Pointwise |y - yhat| / |y|; cells with y == 0 are NaN."""
    Y, Yhat = np.asarray(Y, dtype=np.float64), np.asarray(Yhat, dtype=np.float64)
    if Y.shape != Yhat.shape:
        raise ValueError(f"error_heatmap: shapes {Y.shape} and {Yhat.shape} differ")
    with np.errstate(divide="ignore", invalid="ignore"):
        out = np.abs(Y - Yhat) / np.abs(Y)
    out[Y == 0] = np.nan
    return out[..., 0] if out.ndim == 3 and out.shape[-1] == 1 else out


def mean_heatmap(maps) -> np.ndarray:
    """Average per-sample heatmaps, ignoring flagged cells."""
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", RuntimeWarning)
        return np.nanmean(np.stack(list(maps)), axis=0)


def persistence_baseline(I, times) -> np.ndarray:
    """Repeat the conditioning frame ``I [s, c]`` at every query time."""
    I = np.asarray(I)
    return np.repeat(I[None], len(np.atleast_1d(times)), axis=0)


def mean_predictor(train_values: np.ndarray) -> np.ndarray:
    """Training-set mean trajectory ``[N_t, s, c]``."""
    return np.asarray(train_values, dtype=np.float64).mean(axis=0)


# ---------------------------------------------------------------------------
# reports


@dataclass
class TimingRecord:
    mode: str
    n_steps: int
    wall_ms: float
    peak_bytes: int


@dataclass
class EvalReport:
    nrmse: np.ndarray                  # per sample
    brmse: np.ndarray                  # per sample
    temporal_error: np.ndarray         # [N_t, 2]: mean, std of per-frame nRMSE
    heatmap: np.ndarray                # [N_t, s]
    times: np.ndarray
    timings: list[TimingRecord] = field(default_factory=list)
    extra: dict = field(default_factory=dict)

    @property
    def aggregate(self) -> dict:
        return {
            "n_samples": int(self.nrmse.size),
            "nrmse_mean": float(np.mean(self.nrmse)),
            "nrmse_std": float(np.std(self.nrmse)),
            "brmse_mean": float(np.mean(self.brmse)),
            "brmse_std": float(np.std(self.brmse)),
        }

    def to_json(self) -> dict:
        return {"aggregate": self.aggregate,
                "per_sample": {"nrmse": self.nrmse.tolist(), "brmse": self.brmse.tolist()},
                "extra": self.extra}


def combine_seeds(reports: list[EvalReport]) -> dict:
    """Mean and standard deviation of per-run means (e.g. two training seeds)."""
    means = np.array([r.aggregate["nrmse_mean"] for r in reports])
    bmeans = np.array([r.aggregate["brmse_mean"] for r in reports])
    return {"runs": len(reports), "nrmse_mean": float(means.mean()), "nrmse_std": float(means.std()),
            "brmse_mean": float(bmeans.mean()), "brmse_std": float(bmeans.std())}


def report_from_predictions(Y: np.ndarray, pred: np.ndarray, times: np.ndarray) -> EvalReport:
    """Build a report from ``Y`` and ``pred`` of shape ``[N, N_t, s, c]``."""
    per_n = np.array([nrmse(y, p) for y, p in zip(Y, pred)])
    per_b = np.array([brmse(y, p) for y, p in zip(Y, pred)])
    frame = np.array([[nrmse(y[k:k + 1], p[k:k + 1]) for k in range(Y.shape[1])] for y, p in zip(Y, pred)])
    temporal = np.stack([frame.mean(axis=0), frame.std(axis=0)], axis=1)
    heat = mean_heatmap(error_heatmap(y, p) for y, p in zip(Y, pred))
    return EvalReport(per_n, per_b, temporal, heat, np.asarray(times))


def predict_dataset(model: VCNeF, dataset: Dataset, times=None, batch_size: int = 64,
                    mode: str = "parallel") -> np.ndarray:
    """Predictions ``[N, T, s, c]`` conditioned on frame 0 of each trajectory."""
    times = dataset.times[1:] if times is None else np.asarray(times)
    chunks = []
    for b in range(0, len(dataset), batch_size):
        u0 = dataset.values[b:b + batch_size, 0]
        chunks.append(model.predict(times, dataset.model_grid, u0, dataset.params[b:b + batch_size], mode=mode))
    return np.concatenate(chunks)


def evaluate(model: VCNeF, dataset: Dataset, batch_size: int = 64) -> tuple[EvalReport, np.ndarray]:
    pred = predict_dataset(model, dataset, batch_size=batch_size)
    Y = dataset.values[:, 1:].astype(np.float64)
    return report_from_predictions(Y, pred, dataset.times[1:]), pred


def evaluate_persistence(dataset: Dataset) -> EvalReport:
    Y = dataset.values[:, 1:].astype(np.float64)
    pred = np.stack([persistence_baseline(v[0], dataset.times[1:]) for v in dataset.values]).astype(np.float64)
    return report_from_predictions(Y, pred, dataset.times[1:])


@dataclass
class ZSSRResult:
    coarse: EvalReport
    fine: EvalReport
    extra: dict = field(default_factory=dict)

    @property
    def ratio(self) -> float:
        return self.fine.aggregate["nrmse_mean"] / self.coarse.aggregate["nrmse_mean"]


def eval_spatial_zssr(model: VCNeF, dataset_fine: Dataset, train_res: int, fine_res: int) -> ZSSRResult:
    """Evaluate at the training resolution and at ``fine_res`` on the same trajectories."""
    from .data import subsample

    if dataset_fine.values.shape[2] != fine_res or fine_res % train_res:
        raise ValueError(f"fine dataset has s={dataset_fine.values.shape[2]}; "
                         f"need s={fine_res}, a multiple of {train_res}")
    if model.cfg.dim == 2:
        for p in (model.cfg.p_small, model.cfg.p_large):
            if fine_res % p:
                raise E.ShapeError("eval_spatial_zssr", (fine_res,), detail=f"patch size {p}")
    coarse, _ = evaluate(model, subsample(dataset_fine, space=fine_res // train_res))
    fine, _ = evaluate(model, dataset_fine)
    result = ZSSRResult(coarse, fine, {"train_res": train_res, "fine_res": fine_res})
    result.extra["ratio"] = result.ratio
    return result


def eval_temporal_zssr(model: VCNeF, dataset_dense: Dataset, coarse_nt: int, dense_nt: int) -> ZSSRResult:
    """Query at ``dense_nt`` frames; frames shared with the ``coarse_nt`` grid must agree."""
    if dataset_dense.values.shape[1] != dense_nt or (dense_nt - 1) % (coarse_nt - 1):
        raise ValueError("dense dataset must hold dense_nt frames nesting the coarse grid")
    stride = (dense_nt - 1) // (coarse_nt - 1)
    Y = dataset_dense.values.astype(np.float64)
    dense_pred = predict_dataset(model, dataset_dense, times=dataset_dense.times[1:])
    coarse_times = dataset_dense.times[::stride]
    coarse_pred = predict_dataset(model, dataset_dense, times=coarse_times[1:])
    shared = dense_pred[:, stride - 1::stride]
    consistency = float(np.max(np.abs(shared - coarse_pred)))
    coarse = report_from_predictions(Y[:, ::stride][:, 1:], coarse_pred, coarse_times[1:])
    fine = report_from_predictions(Y[:, 1:], dense_pred, dataset_dense.times[1:])
    result = ZSSRResult(coarse, fine, {"coarse_nt": coarse_nt, "dense_nt": dense_nt,
                                       "shared_max_abs_diff": consistency})
    result.extra["ratio"] = result.ratio
    return result


# ---------------------------------------------------------------------------
# rollout timing


def rollout_times(n_steps: int, horizon: float = 1.0) -> np.ndarray:
    return np.arange(1, n_steps + 1) * (horizon / n_steps)


def _peak_bytes(model: VCNeF, times, X, u0, p, mode: str) -> int:
    with torch.no_grad(), E.track_allocations() as tracker:
        forward(times, X, u0, p, model.params, model.cfg, mode=mode)
    return tracker.peak


def bench_rollout(model: VCNeF, X, u0, p, n_steps_list=(40, 80, 120, 160, 200, 240),
                  modes=("parallel", "sequential"), warmup: int = 3, repeats: int = 5,
                  tol: float = 1e-6, threads: int = 1) -> list[TimingRecord]:
    """Median wall time and peak transient allocation per (mode, n_steps).

    Parallel and sequential outputs are compared before any timing starts.
    ``peak_bytes`` counts engine-produced arrays only; the sequential output
    buffer is excluded.
    """
    dtype = model.params.dtype
    X = torch.as_tensor(np.asarray(X), dtype=dtype)
    u0 = torch.as_tensor(np.asarray(u0), dtype=dtype)
    p = torch.as_tensor(np.asarray(p), dtype=dtype)
    with torch.no_grad():
        for n in n_steps_list:
            t = rollout_times(n)
            a = forward(t, X, u0, p, model.params, model.cfg, mode="parallel")
            b = forward(t, X, u0, p, model.params, model.cfg, mode="sequential")
            diff = float((a - b).abs().max())
            if not diff < tol:
                raise BenchmarkMismatch(f"parallel and sequential outputs differ by {diff:.3e} at n_steps={n}")

    prev = torch.get_num_threads()
    torch.set_num_threads(threads)
    records = []
    try:
        for mode in modes:
            for n in n_steps_list:
                t = torch.as_tensor(rollout_times(n), dtype=dtype)
                with torch.no_grad():
                    for _ in range(warmup):
                        forward(t, X, u0, p, model.params, model.cfg, mode=mode)
                    walls = []
                    for _ in range(repeats):
                        tic = time.perf_counter()
                        forward(t, X, u0, p, model.params, model.cfg, mode=mode)
                        walls.append(1000.0 * (time.perf_counter() - tic))
                records.append(TimingRecord(mode, int(n), statistics.median(walls),
                                            _peak_bytes(model, t, X, u0, p, mode)))
    finally:
        torch.set_num_threads(prev)
    return records


def linear_fit_r2(x, y) -> float:
    x, y = np.asarray(x, dtype=np.float64), np.asarray(y, dtype=np.float64)
    slope, intercept = np.polyfit(x, y, 1)
    resid = y - (slope * x + intercept)
    ss_tot = np.sum((y - y.mean()) ** 2)
    return float(1.0 - np.sum(resid ** 2) / ss_tot) if ss_tot > 0 else 1.0


# ---------------------------------------------------------------------------
# export


def write_report(report: EvalReport, out_dir, config_hash: str, extra: dict | None = None) -> dict[str, Path]:
    """Write ``report.json``, ``temporal_error.csv`` and ``heatmap.csv``."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    payload = report.to_json()
    payload["config_hash"] = config_hash
    payload.update(extra or {})
    paths = {"report": out / "report.json", "temporal": out / "temporal_error.csv", "heatmap": out / "heatmap.csv"}
    paths["report"].write_text(json.dumps(payload, indent=2, sort_keys=True))
    with open(paths["temporal"], "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["# config_hash", config_hash])
        w.writerow(["t", "mean", "std"])
        for t, (m, s) in zip(report.times, report.temporal_error):
            w.writerow([repr(float(t)), repr(float(m)), repr(float(s))])
    with open(paths["heatmap"], "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["# config_hash", config_hash])
        for row in report.heatmap:
            w.writerow([repr(float(v)) for v in row])
    return paths


def write_bench(records: list[TimingRecord], path, config_hash: str) -> Path:
    path = Path(path)
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["# config_hash", config_hash])
        w.writerow(["mode", "n_steps", "wall_ms_median", "peak_bytes"])
        for r in records:
            w.writerow([r.mode, r.n_steps, f"{r.wall_ms:.3f}", r.peak_bytes])
    return path


def read_bench(path) -> list[TimingRecord]:
    with open(path, newline="") as f:
        rows = [r for r in csv.reader(f) if r and not r[0].startswith("#")]
    return [TimingRecord(r[0], int(r[1]), float(r[2]), int(r[3])) for r in rows[1:]]
