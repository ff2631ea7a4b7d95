"""Figures written next to the CSV reports."""
from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import csv  # noqa: E402

import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

from .evaluation import EvalReport, TimingRecord  # noqa: E402

RC = {
    "figure.figsize": (6.0, 3.8),
    "font.size": 10,
    "axes.spines.top": False,
    "axes.spines.right": False,
    "savefig.dpi": 150,
}


def plot_temporal_error(report: EvalReport, path, label: str = "VCNeF",
                        baseline: EvalReport | None = None) -> Path:
    with plt.rc_context(RC):
        fig, ax = plt.subplots()
        mean, std = report.temporal_error[:, 0], report.temporal_error[:, 1]
        ax.plot(report.times, mean, marker="o", ms=3, label=label)
        ax.fill_between(report.times, mean - std, mean + std, alpha=0.25)
        if baseline is not None:
            ax.plot(baseline.times, baseline.temporal_error[:, 0], ls="--", color="0.4", label="persistence")
        ax.set_xlabel("t")
        ax.set_ylabel("nRMSE per frame")
        ax.legend(frameon=False)
        fig.tight_layout()
        fig.savefig(path)
        plt.close(fig)
    return Path(path)


def plot_heatmap(report: EvalReport, path) -> Path:
    with plt.rc_context(RC):
        fig, ax = plt.subplots()
        heat = np.ma.masked_invalid(report.heatmap)
        # relative errors explode near zero crossings; clip the colour range
        vmax = float(np.nanpercentile(report.heatmap, 95)) if np.isfinite(report.heatmap).any() else 1.0
        im = ax.imshow(heat, aspect="auto", origin="lower", cmap="magma", vmin=0.0, vmax=vmax,
                       extent=(0, report.heatmap.shape[1], report.times[0], report.times[-1]))
        ax.set_xlabel("grid index")
        ax.set_ylabel("t")
        fig.colorbar(im, ax=ax, label="|y - ŷ| / |y|")
        fig.tight_layout()
        fig.savefig(path)
        plt.close(fig)
    return Path(path)


def plot_bench(records: list[TimingRecord], path) -> Path:
    with plt.rc_context(RC):
        fig, (ax_t, ax_m) = plt.subplots(1, 2, figsize=(9.0, 3.6))
        for mode in sorted({r.mode for r in records}):
            rs = sorted((r for r in records if r.mode == mode), key=lambda r: r.n_steps)
            steps = [r.n_steps for r in rs]
            ax_t.plot(steps, [r.wall_ms for r in rs], marker="o", label=mode)
            ax_m.plot(steps, [r.peak_bytes / 2 ** 20 for r in rs], marker="o", label=mode)
        ax_t.set_xlabel("predicted timesteps")
        ax_t.set_ylabel("wall time [ms]")
        ax_m.set_xlabel("predicted timesteps")
        ax_m.set_ylabel("peak transient memory [MiB]")
        ax_t.legend(frameon=False)
        fig.tight_layout()
        fig.savefig(path)
        plt.close(fig)
    return Path(path)


def plot_loss(log_path, path) -> Path:
    """Training loss per step from the CSV training log."""
    with open(log_path, newline="") as f:
        rows = list(csv.DictReader(f))
    with plt.rc_context(RC):
        fig, ax = plt.subplots()
        if rows:
            ax.semilogy([int(r["step"]) for r in rows], [float(r["loss"]) for r in rows], lw=0.8)
        ax.set_xlabel("step")
        ax.set_ylabel("MSE loss")
        fig.tight_layout()
        fig.savefig(path)
        plt.close(fig)
    return Path(path)
