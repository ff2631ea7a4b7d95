"""Acceptance criteria 1-13, each printing one PASS/FAIL line.

The learning criteria (6, 7, 8, 12) train desk-scale models and take tens of
minutes on one core; select or deselect them with ``-m acceptance``.
"""
import math
import statistics
import time

import numpy as np
import pytest
import torch
from scipy import stats

from vcnef import engine as E
from vcnef.data import (SinusoidalIC, cole_hopf_burgers, generate_dataset, read_dataset, regenerate,
                        sample_ic, solve_burgers, stable_dt, write_dataset)
from vcnef.evaluation import (brmse, error_heatmap, eval_spatial_zssr, eval_temporal_zssr, evaluate,
                              evaluate_persistence, mean_predictor, nrmse, report_from_predictions, rollout_times)
from vcnef.model import ModelConfig, VCNeF, forward, init_params, linear_attention, quadratic_attention
from vcnef.training import (TrainConfig, epoch_rng, load_checkpoint, mse_loss, save_checkpoint,
                            starting_point_schedule, train)

pytestmark = pytest.mark.acceptance

F64 = torch.float64


@pytest.fixture
def verdict(capsys):
    def emit(n: int, ok: bool, detail: str):
        with capsys.disabled():
            print(f"\n{'PASS' if ok else 'FAIL'} criterion {n}: {detail}")
        assert ok, detail
    return emit


def randn(*shape, seed=0, dtype=F64):
    return torch.randn(*shape, generator=torch.Generator().manual_seed(seed), dtype=dtype)


def grid(s):
    return torch.linspace(-1, 1, s + 1, dtype=F64)[:-1].reshape(s, 1)


# ---------------------------------------------------------------------------
# 1-5: model properties


def test_c01_linear_attention_equivalence(verdict):
    tic = time.perf_counter()
    worst = 0.0
    for n in (1, 8, 64):
        for seed in range(20):
            Q, K, V = randn(n, 16, seed=seed), randn(n, 16, seed=seed + 100), randn(n, 16, seed=seed + 200)
            diff = (linear_attention(Q, K, V) - quadratic_attention(Q, K, V)).abs().max()
            worst = max(worst, float(diff))
    elapsed = time.perf_counter() - tic
    verdict(1, worst < 1e-10 and elapsed < 1.0, f"max diff {worst:.2e} (< 1e-10), {elapsed:.2f} s (< 1 s)")


def _median_ms(fn, repeats=7):
    fn()
    walls = []
    for _ in range(repeats):
        tic = time.perf_counter()
        fn()
        walls.append(time.perf_counter() - tic)
    return statistics.median(walls)


def test_c02_attention_scaling(verdict):
    tic = time.perf_counter()
    times = {}
    for n in (1024, 4096):
        Q, K, V = randn(n, 32, seed=1), randn(n, 32, seed=2), randn(n, 32, seed=3)
        with torch.no_grad():
            times["linear", n] = _median_ms(lambda: linear_attention(Q, K, V), repeats=15)
            times["quadratic", n] = _median_ms(lambda: quadratic_attention(Q, K, V), repeats=3)
    lin = times["linear", 4096] / times["linear", 1024]
    quad = times["quadratic", 4096] / times["quadratic", 1024]
    elapsed = time.perf_counter() - tic
    verdict(2, lin <= 6 and quad >= 12 and elapsed < 120,
            f"linear ratio {lin:.2f} (<= 6), quadratic ratio {quad:.2f} (>= 12), {elapsed:.1f} s")


def test_c03_end_to_end_gradient(verdict):
    tic = time.perf_counter()
    cfg = ModelConfig(d=8, heads=2, n_enc=1, n_mod=1, seed=3)
    params = init_params(cfg, F64)
    X = grid(4)
    u0, p = randn(4, 1, seed=4), torch.tensor([0.4], dtype=F64)
    target = randn(1, 4, 1, seed=5)
    t = torch.tensor([0.5], dtype=F64)

    def loss(leaves):
        return mse_loss(forward(t, X, u0, p, {**params, **leaves}, cfg), target)

    leaves = {n: params[n] for n in params.trainable}
    auto = E.backward(E.record(loss, leaves))
    fd = E.finite_diff_grad(loss, leaves)
    worst, name = 0.0, ""
    for n in leaves:
        err = float((auto[n] - fd[n]).abs().max() / max(float(fd[n].abs().max()), 1e-8))
        if err > worst:
            worst, name = err, n
    elapsed = time.perf_counter() - tic
    verdict(3, worst < 1e-4 and elapsed < 120,
            f"{len(leaves)} parameters, worst relative error {worst:.2e} at {name} (< 1e-4), {elapsed:.1f} s")


def _peak(cfg, params, t, X, u0, p, mode):
    with torch.no_grad(), E.track_allocations() as tracker:
        forward(t, X, u0, p, params, cfg, mode=mode)
    return tracker.peak


def test_c04_parallel_sequential_rollout(verdict):
    tic = time.perf_counter()
    X = grid(64).float()
    worst = 0.0
    with torch.no_grad():
        for seed in range(10):
            cfg = ModelConfig(seed=seed)
            params = init_params(cfg)
            u0, p = randn(64, 1, seed=seed + 10, dtype=torch.float32), torch.rand(1, generator=torch.Generator().manual_seed(seed))
            t = torch.as_tensor(rollout_times(40), dtype=torch.float32)
            a = forward(t, X, u0, p, params, cfg, mode="parallel")
            b = forward(t, X, u0, p, params, cfg, mode="sequential")
            worst = max(worst, float((a - b).abs().max()))
    cfg = ModelConfig(seed=0)
    params = init_params(cfg)
    u0, p = randn(64, 1, seed=10, dtype=torch.float32), torch.tensor([0.4])
    steps = [40, 80, 120, 160, 200, 240]
    par = [_peak(cfg, params, torch.as_tensor(rollout_times(n)).float(), X, u0, p, "parallel") for n in steps]
    seq = [_peak(cfg, params, torch.as_tensor(rollout_times(n)).float(), X, u0, p, "sequential") for n in (40, 240)]
    flat = abs(seq[1] - seq[0]) / seq[0]
    grows = all(b > a for a, b in zip(par, par[1:]))
    elapsed = time.perf_counter() - tic
    verdict(4, worst < 1e-6 and flat <= 0.2 and grows and elapsed < 300,
            f"max diff {worst:.2e} (< 1e-6), sequential peak change {100 * flat:.1f}% (<= 20%), "
            f"parallel peaks monotone={grows}, {elapsed:.1f} s")


def test_c05_permutation_equivariance(verdict):
    tic = time.perf_counter()
    cfg = ModelConfig(seed=7)
    params = init_params(cfg, F64)
    X, u0, p = grid(64), randn(64, 1, seed=1), torch.tensor([0.4], dtype=F64)
    t = torch.tensor([0.25, 0.5, 1.0], dtype=F64)
    with torch.no_grad():
        base = forward(t, X, u0, p, params, cfg)
        worst = 0.0
        for seed in range(5):
            perm = torch.randperm(64, generator=torch.Generator().manual_seed(seed))
            out = forward(t, X[perm], u0[perm], p, params, cfg)
            worst = max(worst, float((out - base[:, perm]).abs().max()))
    elapsed = time.perf_counter() - tic
    verdict(5, worst < 1e-10 and elapsed < 60, f"max diff {worst:.2e} (< 1e-10), {elapsed:.1f} s")


# ---------------------------------------------------------------------------
# 6-8: desk-scale learning and zero-shot super-resolution


@pytest.fixture(scope="module")
def desk_run():
    train_set = generate_dataset("advection", 512, seed=1, s=64, n_t=21, params=(0.4,))
    test_set = generate_dataset("advection", 64, seed=2, s=64, n_t=21, params=(0.4,))
    mc = ModelConfig()
    tic = time.perf_counter()
    res = train(train_set, mc, TrainConfig())
    elapsed = time.perf_counter() - tic
    model = VCNeF(mc, res.state.params, time_scale=float(train_set.times[-1]))
    return {"train": train_set, "test": test_set, "model": model, "minutes": elapsed / 60}


def test_c06_desk_scale_learning(verdict, desk_run):
    test = desk_run["test"]
    rep, _ = evaluate(desk_run["model"], test)
    persist = evaluate_persistence(test).aggregate["nrmse_mean"]
    Y = test.values[:, 1:].astype(np.float64)
    mean = np.broadcast_to(mean_predictor(desk_run["train"].values)[1:], Y.shape)
    mean_err = report_from_predictions(Y, mean, test.times[1:]).aggregate["nrmse_mean"]
    model_err = rep.aggregate["nrmse_mean"]
    ok = model_err < 0.5 * persist and model_err < mean_err and desk_run["minutes"] <= 30
    verdict(6, ok, f"nRMSE {model_err:.4f} vs 0.5 x persistence {0.5 * persist:.4f} and mean predictor "
                   f"{mean_err:.4f}; trained in {desk_run['minutes']:.1f} min (<= 30, 1 core)")


def test_c07_spatial_zssr(verdict, desk_run):
    tic = time.perf_counter()
    fine = regenerate(desk_run["test"], s=128)
    z = eval_spatial_zssr(desk_run["model"], fine, 64, 128)
    elapsed = time.perf_counter() - tic
    verdict(7, z.ratio <= 1.25 and elapsed < 300,
            f"nRMSE(64) {z.coarse.aggregate['nrmse_mean']:.4f}, nRMSE(128) {z.fine.aggregate['nrmse_mean']:.4f}, "
            f"ratio {z.ratio:.3f} (<= 1.25), {elapsed:.1f} s")


def test_c08_temporal_zssr(verdict, desk_run):
    tic = time.perf_counter()
    dense = regenerate(desk_run["test"], n_t=41)
    z = eval_temporal_zssr(desk_run["model"], dense, 21, 41)
    shared = z.extra["shared_max_abs_diff"]
    elapsed = time.perf_counter() - tic
    verdict(8, shared < 1e-6 and z.ratio <= 1.10 and elapsed < 300,
            f"shared-timestamp diff {shared:.2e} (< 1e-6), nRMSE ratio {z.ratio:.3f} (<= 1.10), {elapsed:.1f} s")


# ---------------------------------------------------------------------------
# 9-11: metrics, reference solver, schedule


def _nrmse_loop(Y, P):
    nt, s, c = Y.shape
    terms = [math.sqrt(sum((Y[t, i, k] - P[t, i, k]) ** 2 for i in range(s)))
             / math.sqrt(sum(Y[t, i, k] ** 2 for i in range(s))) for t in range(nt) for k in range(c)]
    return sum(terms) / len(terms)


def _brmse_loop(Y, P):
    nt, s, c = Y.shape
    return sum(math.sqrt(((Y[t, 0, k] - P[t, 0, k]) ** 2 + (Y[t, s - 1, k] - P[t, s - 1, k]) ** 2) / 2)
               for t in range(nt) for k in range(c)) / (nt * c)


def _mse_loop(Y, P):
    flat_y, flat_p = Y.ravel().tolist(), P.ravel().tolist()
    return sum((a - b) ** 2 for a, b in zip(flat_y, flat_p)) / len(flat_y)


def test_c09_metric_oracles(verdict):
    tic = time.perf_counter()
    worst = {"nrmse": 0.0, "brmse": 0.0, "mse": 0.0, "heatmap": 0.0}
    for seed in range(100):
        rng = np.random.default_rng(seed)
        nt, s, c = rng.integers(1, 5), rng.integers(2, 17), rng.integers(1, 3)
        Y, P = rng.normal(size=(nt, s, c)), rng.normal(size=(nt, s, c))
        worst["nrmse"] = max(worst["nrmse"], abs(nrmse(Y, P) - _nrmse_loop(Y, P)))
        worst["brmse"] = max(worst["brmse"], abs(brmse(Y, P) - _brmse_loop(Y, P)))
        mse = float(mse_loss(torch.as_tensor(Y), torch.as_tensor(P)))
        worst["mse"] = max(worst["mse"], abs(mse - _mse_loop(Y, P)))
        heat = [[[abs(Y[t, i, k] - P[t, i, k]) / abs(Y[t, i, k]) for k in range(c)] for i in range(s)]
                for t in range(nt)]
        got = error_heatmap(Y, P).reshape(nt, s, c)
        worst["heatmap"] = max(worst["heatmap"], float(np.max(np.abs(got - np.array(heat)))))
    elapsed = time.perf_counter() - tic
    verdict(9, max(worst.values()) < 1e-12 and elapsed < 60,
            ", ".join(f"{k} {v:.1e}" for k, v in worst.items()) + f" (< 1e-12), {elapsed:.1f} s")


def test_c10_burgers_reference_solver(verdict):
    tic = time.perf_counter()
    drift = 0.0
    times = np.linspace(0.0, 2.0, 21)
    for seed in range(4):
        ic = sample_ic(seed)
        for nu in (0.001, 0.01, 0.1):
            traj = solve_burgers(ic, nu, 64, stable_dt(ic, nu, 64, times[1]), times)
            mass = traj.values[:, :, 0].sum(axis=1) / 64
            drift = max(drift, float(np.max(np.abs(mass - mass[0]))))

    ic = SinusoidalIC((0.4, 0.2), (1, 2), (0.3, 1.1), 1.0)
    nu, T, ref_s = 0.05, 0.2, 2048
    dt = stable_dt(ic, nu, ref_s, T)
    ref = solve_burgers(ic, nu, ref_s, dt, [0.0, T]).values[-1, :, 0]
    errors = []
    for s in (64, 128, 256):
        u = solve_burgers(ic, nu, s, dt, [0.0, T]).values[-1, :, 0]
        errors.append(np.sqrt(np.mean((u - ref[::ref_s // s]) ** 2)))
    order = min(math.log2(errors[i] / errors[i + 1]) for i in range(2))

    ic = SinusoidalIC((0.5,), (1,), (0.3,), 1.0)
    traj = solve_burgers(ic, 0.1, 256, stable_dt(ic, 0.1, 256, 0.05), np.linspace(0, 0.5, 11))
    exact = cole_hopf_burgers(ic, 0.1, 0.5, traj.grid[:, 0])
    rms = float(np.sqrt(np.mean((traj.values[-1, :, 0] - exact) ** 2)))
    elapsed = time.perf_counter() - tic
    verdict(10, drift < 1e-8 and order >= 1.8 and rms < 1e-3 and elapsed < 600,
            f"mass drift {drift:.1e} (< 1e-8), order {order:.2f} (>= 1.8), Cole-Hopf RMS {rms:.1e} (< 1e-3), "
            f"{elapsed:.1f} s")


def test_c11_starting_point_schedule(verdict):
    tic = time.perf_counter()
    counts = np.zeros(40)
    well_formed = True
    for epoch in range(1000):
        sched = starting_point_schedule(epoch_rng(0, epoch), 41)
        rest = sched[1:]
        well_formed &= len(sched) == 11 and sched[0] == 0 and len(set(rest)) == 10
        well_formed &= all(1 <= s <= 40 for s in rest)
        for s in rest:
            counts[s - 1] += 1
    pvalue = stats.chisquare(counts).pvalue
    elapsed = time.perf_counter() - tic
    verdict(11, well_formed and pvalue > 0.01 and elapsed < 60,
            f"schedules well formed={well_formed}, chi-square p {pvalue:.3f} (> 0.01), {elapsed:.1f} s")


# ---------------------------------------------------------------------------
# 12-13: parameter conditioning, persistence of artifacts


def test_c12_parameter_conditioning(verdict):
    tic = time.perf_counter()
    seen = generate_dataset("advection", 512, seed=11, s=64, n_t=21, params=(0.2, 0.4))
    unseen = generate_dataset("advection", 64, seed=12, s=64, n_t=21, params=(0.3,))
    mc = ModelConfig()
    res = train(seen, mc, TrainConfig())
    model = VCNeF(mc, res.state.params, time_scale=float(seen.times[-1]))
    err = evaluate(model, unseen)[0].aggregate["nrmse_mean"]
    persist = evaluate_persistence(unseen).aggregate["nrmse_mean"]
    minutes = (time.perf_counter() - tic) / 60
    verdict(12, err < persist and minutes <= 60,
            f"nRMSE at unseen beta=0.3 {err:.4f} vs persistence {persist:.4f}, {minutes:.1f} min (<= 60)")


def test_c13_artifact_persistence(verdict, tmp_path):
    tic = time.perf_counter()
    ok = {}
    for pde, params in (("advection", (0.4,)), ("burgers", (0.01,))):
        d = generate_dataset(pde, 4, seed=3, s=32, n_t=6, params=params)
        write_dataset(d, tmp_path / f"{pde}.vcnf")
        back = read_dataset(tmp_path / f"{pde}.vcnf")
        ok[f"{pde} dataset"] = (np.array_equal(back.values, d.values) and np.array_equal(back.times, d.times)
                                and np.array_equal(back.params, d.params) and back.meta == d.meta)

    d = generate_dataset("advection", 4, seed=4, s=16, n_t=6)
    mc = ModelConfig(d=16, heads=2, n_enc=1, n_mod=1, seed=1)
    tc = TrainConfig(epochs=4, batch_size=2, precision="float64", randomized_starts=True)
    full = train(d, mc, tc)
    first = train(d, mc, tc, stop_epoch=2)
    save_checkpoint(first.state, tmp_path / "c.vcnp", mc, tc, {"note": "half"})
    ck = load_checkpoint(tmp_path / "c.vcnp")
    ok["checkpoint"] = (ck.model_cfg == mc and ck.train_cfg == tc and ck.state.step == first.state.step
                        and all(torch.equal(ck.state.params[n], first.state.params[n])
                                and torch.equal(ck.state.m[n], first.state.m[n])
                                and torch.equal(ck.state.v[n], first.state.v[n]) for n in first.state.params))
    rest = train(d, ck.model_cfg, ck.train_cfg, state=ck.state)
    ok["resume"] = first.losses + rest.losses == full.losses
    elapsed = time.perf_counter() - tic
    verdict(13, all(ok.values()) and elapsed < 300,
            ", ".join(f"{k} {'exact' if v else 'MISMATCH'}" for k, v in ok.items()) + f", {elapsed:.1f} s")
