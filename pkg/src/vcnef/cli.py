"""``vcnef generate|train|eval|bench``."""
from __future__ import annotations

import argparse
import logging
import math
import os
import sys
from pathlib import Path

import numpy as np
import torch

from . import plotting
from .config import ConfigError, RunConfig
from .data import Dataset, DatasetFormatError, generate_dataset, read_dataset, regenerate, write_dataset
from .evaluation import (BenchmarkMismatch, bench_rollout, eval_spatial_zssr, eval_temporal_zssr, evaluate,
                         evaluate_persistence, write_bench, write_report)
from .model import VCNeF
from .training import (CheckpointError, TrainingDiverged, load_checkpoint, save_checkpoint, train)

log = logging.getLogger("vcnef")

DATASET_FILE = "dataset.vcnf"
CHECKPOINT_FILE = "checkpoint.vcnp"
TRAIN_LOG_FILE = "train_log.csv"
BENCH_FILE = "bench.csv"


class CLIError(RuntimeError):
    pass


def _threads() -> None:
    n = os.environ.get("VCNEF_THREADS")
    if n:
        torch.set_num_threads(max(1, int(n)))


def _out_dir(args) -> Path:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _load_config(args) -> RunConfig:
    overrides = list(args.set or [])
    for flag, key in (("randomized_starts", "train.randomized_starts"), ("absolute_times", "train.absolute_times")):
        if getattr(args, flag, False):
            overrides.append(f"{key}=true")
    if getattr(args, "clip_grad", None) is not None:
        overrides.append(f"train.clip_grad={args.clip_grad}")
    if getattr(args, "epochs", None) is not None:
        overrides.append(f"train.epochs={args.epochs}")
    return RunConfig.load(args.config, overrides)


def _require_finite(name: str, *values) -> None:
    for v in values:
        if not np.all(np.isfinite(v)):
            raise CLIError(f"{name} contains non-finite values")


# ---------------------------------------------------------------------------
# generate


def cmd_generate(args) -> int:
    cfg = _load_config(args)
    dc = cfg.data
    d = generate_dataset(dc.pde, dc.n, seed=cfg.data_seed, s=dc.s, n_t=dc.n_t, t_final=dc.t_final,
                         params=tuple(dc.params), n_modes=dc.n_modes, max_mode=dc.max_mode,
                         amp_range=tuple(dc.amp_range), length=dc.length)
    d.meta["config_hash"] = cfg.hash
    _require_finite("dataset", d.values)
    path = _out_dir(args) / DATASET_FILE
    write_dataset(d, path)
    n, nt, s, c = d.values.shape
    print(f"wrote {path}: N={n} N_t={nt} s={s} c={c} pde={dc.pde} config_hash={cfg.hash}")
    if dc.pde == "burgers":
        mass = d.values.astype(np.float64).sum(axis=2) * d.meta["dx"]
        drift = float(np.max(np.abs(mass - mass[:, :1])))
        # float32 storage limits how well the stored fields reproduce the mass
        print(f"conservation: max |mass(t) - mass(0)| = {drift:.3e}")
    return 0


# ---------------------------------------------------------------------------
# train


def cmd_train(args) -> int:
    cfg = _load_config(args)
    dataset = read_dataset(args.dataset)
    if dataset.values.shape[3] != cfg.model.c or dataset.params.shape[1] != cfg.model.j:
        raise CLIError(f"dataset has c={dataset.values.shape[3]}, j={dataset.params.shape[1]}; "
                       f"model expects c={cfg.model.c}, j={cfg.model.j}")
    out = _out_dir(args)
    state = None
    model_cfg, train_cfg = cfg.model, cfg.train
    if args.resume:
        ckpt = load_checkpoint(args.resume)
        if ckpt.meta.get("config_hash") != cfg.hash:
            raise CLIError("resume checkpoint was produced by a different config")
        state, model_cfg, train_cfg = ckpt.state, ckpt.model_cfg, ckpt.train_cfg
    if state is not None and state.epoch >= train_cfg.epochs:
        print(f"checkpoint already at epoch {state.epoch}; nothing to do")
        return 0
    log_path = out / TRAIN_LOG_FILE
    if state is None and log_path.exists():
        log_path.unlink()
    try:
        result = train(dataset, model_cfg, train_cfg, state=state, log_path=log_path, stop_epoch=args.stop_epoch)
    except TrainingDiverged as err:
        raise CLIError(str(err)) from err
    _require_finite("training loss", result.losses)
    meta = {"config_hash": cfg.hash, "config": cfg.to_dict(), "time_scale": float(dataset.times[-1]),
            "s": int(dataset.values.shape[2]), "c": int(dataset.values.shape[3]),
            "j": int(dataset.params.shape[1]), "pde": dataset.meta.get("pde"),
            "dataset_config_hash": dataset.meta.get("config_hash")}
    save_checkpoint(result.state, out / CHECKPOINT_FILE, model_cfg, train_cfg, meta)
    plotting.plot_loss(log_path, out / "train_loss.png")
    last = result.epoch_losses[-1] if result.epoch_losses else float("nan")
    print(f"trained to epoch {result.state.epoch}/{train_cfg.epochs}, last epoch loss {last:.4e}; "
          f"wrote {out / CHECKPOINT_FILE}")
    return 0


# ---------------------------------------------------------------------------
# eval


def _load_model(path) -> tuple[VCNeF, dict]:
    ckpt = load_checkpoint(path)
    return VCNeF(ckpt.model_cfg, ckpt.state.params, time_scale=ckpt.meta.get("time_scale", 1.0)), ckpt.meta


def _check_pair(meta: dict, dataset: Dataset, model: VCNeF) -> None:
    c, j = dataset.values.shape[3], dataset.params.shape[1]
    if c != model.cfg.c or j != model.cfg.j:
        raise CLIError(f"checkpoint expects c={model.cfg.c}, j={model.cfg.j}; dataset has c={c}, j={j}")
    if meta.get("pde") and dataset.meta.get("pde") and meta["pde"] != dataset.meta["pde"]:
        raise CLIError(f"checkpoint trained on {meta['pde']}, dataset holds {dataset.meta['pde']}")
    horizon = float(dataset.times[-1])
    if not math.isclose(horizon, meta.get("time_scale", horizon)):
        raise CLIError(f"dataset horizon {horizon} differs from the training horizon {meta['time_scale']}")


def cmd_eval(args) -> int:
    model, meta = _load_model(args.checkpoint)
    dataset = read_dataset(args.dataset)
    _check_pair(meta, dataset, model)
    chash = meta.get("config_hash", "")
    out = _out_dir(args)
    ev = RunConfig.from_dict(meta["config"]).eval if meta.get("config") else None
    spatial = args.spatial_zssr or (ev.spatial_zssr if ev else None)
    temporal = args.temporal_zssr or (ev.temporal_zssr if ev else None)

    report, _ = evaluate(model, dataset, batch_size=ev.batch_size if ev else 64)
    persist = evaluate_persistence(dataset)
    extra = {"persistence": persist.aggregate, "checkpoint": str(args.checkpoint), "dataset": str(args.dataset)}
    if spatial:
        s = dataset.values.shape[2]
        fine = regenerate(dataset, s=s * spatial)
        z = eval_spatial_zssr(model, fine, s, s * spatial)
        extra["spatial_zssr"] = {"coarse": z.coarse.aggregate, "fine": z.fine.aggregate, **z.extra}
        write_report(z.fine, out / "spatial_zssr", chash, {"zssr": z.extra})
        plotting.plot_temporal_error(z.fine, out / "spatial_zssr" / "temporal_error.png")
    if temporal:
        nt = dataset.values.shape[1]
        dense_nt = (nt - 1) * temporal + 1
        dense = regenerate(dataset, n_t=dense_nt)
        z = eval_temporal_zssr(model, dense, nt, dense_nt)
        extra["temporal_zssr"] = {"coarse": z.coarse.aggregate, "fine": z.fine.aggregate, **z.extra}
        write_report(z.fine, out / "temporal_zssr", chash, {"zssr": z.extra})
        plotting.plot_temporal_error(z.fine, out / "temporal_zssr" / "temporal_error.png")
    _require_finite("report", report.nrmse, report.brmse)
    paths = write_report(report, out, chash, extra)
    plotting.plot_temporal_error(report, out / "temporal_error.png", baseline=persist)
    plotting.plot_heatmap(report, out / "heatmap.png")
    agg = report.aggregate
    print(f"nRMSE {agg['nrmse_mean']:.4f} ± {agg['nrmse_std']:.4f}  bRMSE {agg['brmse_mean']:.4f}  "
          f"persistence nRMSE {persist.aggregate['nrmse_mean']:.4f}; wrote {paths['report']}")
    for key in ("spatial_zssr", "temporal_zssr"):
        if key in extra:
            print(f"{key}: coarse {extra[key]['coarse']['nrmse_mean']:.4f} "
                  f"fine {extra[key]['fine']['nrmse_mean']:.4f} ratio {extra[key]['ratio']:.3f}")
    return 0


# ---------------------------------------------------------------------------
# bench


def cmd_bench(args) -> int:
    model, meta = _load_model(args.checkpoint)
    ev = RunConfig.from_dict(meta.get("config", {})).eval if meta.get("config") else None
    steps = args.steps or (ev.bench_steps if ev else [40, 80, 120, 160, 200, 240])
    modes = ["parallel", "sequential"] if args.mode == "both" else [args.mode]
    if args.dataset:
        dataset = read_dataset(args.dataset)
        _check_pair(meta, dataset, model)
    else:
        cfg = RunConfig.from_dict(meta["config"])
        dc = cfg.data
        dataset = generate_dataset(dc.pde, 1, seed=cfg.data_seed, s=meta.get("s", dc.s), n_t=2,
                                   t_final=dc.t_final, params=tuple(dc.params))
    u0, p = dataset.values[0, 0], dataset.params[0]
    try:
        records = bench_rollout(model, dataset.model_grid, u0, p, steps, modes,
                                warmup=args.warmup, repeats=args.repeats)
    except BenchmarkMismatch as err:
        raise CLIError(f"benchmark aborted: {err}") from err
    out = _out_dir(args)
    path = write_bench(records, out / BENCH_FILE, meta.get("config_hash", ""))
    plotting.plot_bench(records, out / "bench.png")
    for r in records:
        print(f"{r.mode:>10s} n_steps={r.n_steps:4d} wall={r.wall_ms:9.2f} ms peak={r.peak_bytes} B")
    print(f"wrote {path}")
    return 0


# ---------------------------------------------------------------------------
# entry point


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="vcnef", description=__doc__)
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, config=True):
        if config:
            p.add_argument("--config", help="JSON run config (defaults apply when omitted)")
            p.add_argument("--set", action="append", metavar="KEY=VALUE",
                           help="override a config entry, e.g. --set train.epochs=5")
        p.add_argument("--out", required=True, help="output directory")

    p = sub.add_parser("generate", help="generate a dataset")
    common(p)
    p.set_defaults(func=cmd_generate)

    p = sub.add_parser("train", help="train a model")
    common(p)
    p.add_argument("--dataset", required=True)
    p.add_argument("--epochs", type=int)
    p.add_argument("--randomized-starts", action="store_true")
    p.add_argument("--absolute-times", action="store_true")
    p.add_argument("--clip-grad", type=float, nargs="?", const=1.0, help="clip gradient norm (default 1.0)")
    p.add_argument("--resume", help="checkpoint to continue from")
    p.add_argument("--stop-epoch", type=int, help="stop after this epoch (for staged runs)")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint")
    common(p, config=False)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--dataset", required=True)
    p.add_argument("--spatial-zssr", type=int, metavar="R",
                   help="also evaluate at R times the resolution (default: eval.spatial_zssr of the run config)")
    p.add_argument("--temporal-zssr", type=int, metavar="K",
                   help="also query K times as many frames (default: eval.temporal_zssr of the run config)")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("bench", help="time parallel and sequential rollouts")
    common(p, config=False)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--dataset")
    p.add_argument("--steps", type=int, nargs="+")
    p.add_argument("--mode", choices=["parallel", "sequential", "both"], default="both")
    p.add_argument("--warmup", type=int, default=3)
    p.add_argument("--repeats", type=int, default=5)
    p.set_defaults(func=cmd_bench)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(message)s")
    _threads()
    try:
        return args.func(args)
    except (ConfigError, CLIError, DatasetFormatError, CheckpointError, FileNotFoundError) as err:
        print(f"vcnef {args.command}: error: {err}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
