import csv
import math

import numpy as np
import pytest
import torch
from scipy import stats

from vcnef.data import generate_dataset
from vcnef.model import ModelConfig, init_params
from vcnef.training import (CheckpointError, CheckpointVersionError, TrainConfig, TrainState, TrainingDiverged,
                            epoch_rng, epoch_starts, load_checkpoint, mse_loss, one_cycle_lr, query_times,
                            save_checkpoint, starting_point_schedule, total_steps_for, train, train_step)

F64 = torch.float64


def tiny_model(**kw):
    return ModelConfig(**{"d": 8, "heads": 2, "n_enc": 1, "n_mod": 1, "seed": 5, **kw})


def small_data(n=4, n_t=5, s=8, **kw):
    return generate_dataset("advection", n, seed=kw.pop("seed", 2), s=s, n_t=n_t, **kw)


def batch_of(d, idx=None):
    idx = slice(None) if idx is None else idx
    return {"Y": d.values[idx], "times": d.times, "X": d.model_grid, "p": d.params[idx]}


# ---------------------------------------------------------------------------
# loss and schedule


def test_mse_loss_cases():
    a = torch.rand(2, 3, 4, 1, dtype=F64)
    assert float(mse_loss(a, a)) == 0.0
    assert float(mse_loss(a + 1, a)) == pytest.approx(1.0, abs=1e-15)
    with pytest.raises(ValueError):
        mse_loss(a, a[:, :2])


def test_mse_loss_matches_scalar_loop():
    rng = np.random.default_rng(0)
    p, t = rng.normal(size=(2, 3, 4, 1)), rng.normal(size=(2, 3, 4, 1))
    total = 0.0
    for i in range(2):
        for j in range(3):
            for k in range(4):
                total += (p[i, j, k, 0] - t[i, j, k, 0]) ** 2
    got = float(mse_loss(torch.as_tensor(p), torch.as_tensor(t)))
    assert got == pytest.approx(total / 24, abs=1e-12)


def test_one_cycle_endpoints():
    cfg = TrainConfig(max_lr=1e-3)
    assert one_cycle_lr(0, 1000, cfg) == pytest.approx(1e-6, rel=1e-12)
    assert one_cycle_lr(200, 1000, cfg) == pytest.approx(1e-3, rel=1e-12)
    assert one_cycle_lr(1000, 1000, cfg) == pytest.approx(1e-7, rel=1e-12)
    with pytest.raises(ValueError):
        one_cycle_lr(1001, 1000, cfg)


def test_one_cycle_shape():
    cfg = TrainConfig(max_lr=1.0)
    lrs = [one_cycle_lr(k, 500, cfg) for k in range(501)]
    assert all(b >= a for a, b in zip(lrs[:100], lrs[1:101]))
    assert all(b <= a for a, b in zip(lrs[100:-1], lrs[101:]))
    assert max(lrs) == lrs[100]


def test_train_config_validation():
    with pytest.raises(ValueError):
        TrainConfig(pct_peak=1.0)
    with pytest.raises(ValueError):
        TrainConfig(start_div=0)
    with pytest.raises(ValueError):
        TrainConfig(precision="float16")
    assert TrainConfig(precision="float64").dtype == F64


def test_schedule_structure():
    sched = starting_point_schedule(np.random.default_rng(0), 41)
    assert len(sched) == 11 and sched[0] == 0
    assert len(set(sched[1:])) == 10 and all(1 <= s <= 40 for s in sched[1:])
    short = starting_point_schedule(np.random.default_rng(0), 5)
    assert short[0] == 0 and sorted(short[1:]) == [1, 2, 3, 4]
    assert starting_point_schedule(epoch_rng(7, 3), 41) == starting_point_schedule(epoch_rng(7, 3), 41)
    with pytest.raises(ValueError):
        starting_point_schedule(np.random.default_rng(0), 1)


def test_schedule_is_uniform():
    counts = np.zeros(40)
    for epoch in range(1000):
        for s in starting_point_schedule(epoch_rng(0, epoch), 41)[1:]:
            counts[s - 1] += 1
    assert stats.chisquare(counts).pvalue > 0.01


def test_epoch_starts_without_randomisation():
    assert epoch_starts(TrainConfig(), 3, 41) == [0]
    assert len(epoch_starts(TrainConfig(randomized_starts=True), 3, 41)) == 11


def test_query_times_conventions():
    times = np.linspace(0, 2, 5)
    assert query_times(times, 0).tolist() == [0.25, 0.5, 0.75, 1.0]
    assert query_times(times, 2).tolist() == [0.25, 0.5]
    assert query_times(times, 2, absolute=True).tolist() == [0.75, 1.0]
    assert query_times(times, 2, norm="remaining").tolist() == [0.5, 1.0]
    with pytest.raises(ValueError):
        query_times(times, 1, norm="bogus")


# ---------------------------------------------------------------------------
# steps


def test_zero_lr_leaves_parameters_unchanged():
    d = small_data()
    mc = tiny_model()
    tc = TrainConfig(max_lr=0.0, precision="float64")
    state = TrainState.fresh(init_params(mc, F64))
    s1, _, _ = train_step(state, batch_of(d), 0, mc, tc, 10)
    s2, _, _ = train_step(s1, batch_of(d), 0, mc, tc, 10)
    assert all(torch.equal(s2.params[n], state.params[n]) for n in state.params)
    assert s2.step == 2


def test_train_step_rejects_bad_start():
    d = small_data()
    mc = tiny_model()
    state = TrainState.fresh(init_params(mc))
    with pytest.raises(ValueError):
        train_step(state, batch_of(d), 4, mc, TrainConfig(), 10)


def test_single_sample_overfit():
    # smooth single-mode trajectory; see the decisions ledger for why not a 5-mode sample
    d = generate_dataset("advection", 1, seed=0, s=32, n_t=11, n_modes=1, max_mode=1)
    mc = ModelConfig(d=32, heads=4)
    tc = TrainConfig(max_lr=1e-2, batch_size=1)
    state = TrainState.fresh(init_params(mc))
    losses = []
    for _ in range(200):
        state, loss, gnorm = train_step(state, batch_of(d), 0, mc, tc, 200)
        losses.append(loss)
        assert math.isfinite(gnorm)
    assert losses[-1] < 1e-3 * losses[0]


def test_divergence_is_reported():
    d = small_data()
    mc = tiny_model()
    params = init_params(mc, F64)
    params["dec.fc2.W"] = torch.full_like(params["dec.fc2.W"], 1e200)
    with pytest.raises(TrainingDiverged) as err:
        train_step(TrainState.fresh(params), batch_of(d), 0, mc, TrainConfig(precision="float64"), 10)
    assert err.value.step == 0 and "step 0" in str(err.value)


def test_clipping_bounds_update():
    d = small_data()
    mc = tiny_model()
    tc = TrainConfig(max_lr=1e-2, clip_grad=1e-3, precision="float64")
    state = TrainState.fresh(init_params(mc, F64))
    _, _, gnorm = train_step(state, batch_of(d), 0, mc, tc, 10)
    assert gnorm > 1e-3  # the logged norm is the pre-clipping value


# ---------------------------------------------------------------------------
# loops


def test_train_touches_only_frame_zero_without_randomisation(tmp_path):
    d = small_data(n=4, n_t=6)
    res = train(d, tiny_model(), TrainConfig(epochs=2, batch_size=2), log_path=tmp_path / "log.csv")
    assert res.conditioning_frames == {0}
    assert all(math.isfinite(x) for x in res.epoch_losses)
    with open(tmp_path / "log.csv") as f:
        rows = list(csv.DictReader(f))
    assert list(rows[0]) == ["epoch", "step", "lr", "loss", "grad_norm", "wall_ms"]
    assert len(rows) == 4 and all(math.isfinite(float(r["grad_norm"])) for r in rows)


def test_randomised_starts_consume_schedule():
    d = small_data(n=2, n_t=41, s=8)
    tc = TrainConfig(epochs=1, batch_size=2, randomized_starts=True)
    res = train(d, tiny_model(), tc)
    assert len(res.schedules[0]) == 11
    # a start on the last frame has no targets and is skipped
    assert len(res.losses) == sum(1 for s in res.schedules[0] if s < 40)
    assert total_steps_for(tc, 2, 41) == len(res.losses)


def test_training_is_deterministic():
    d = small_data()
    tc = TrainConfig(epochs=2, batch_size=2, precision="float64")
    a = train(d, tiny_model(), tc)
    b = train(d, tiny_model(), tc)
    assert a.losses == b.losses
    assert all(torch.equal(a.state.params[n], b.state.params[n]) for n in a.state.params)


def test_resume_reproduces_losses(tmp_path):
    d = small_data()
    mc = tiny_model()
    tc = TrainConfig(epochs=4, batch_size=2, precision="float64", randomized_starts=True)
    full = train(d, mc, tc)
    first = train(d, mc, tc, stop_epoch=2)
    save_checkpoint(first.state, tmp_path / "c.vcnp", mc, tc)
    ck = load_checkpoint(tmp_path / "c.vcnp")
    rest = train(d, ck.model_cfg, ck.train_cfg, state=ck.state)
    assert first.losses + rest.losses == full.losses


# ---------------------------------------------------------------------------
# checkpoints


def test_checkpoint_round_trip(tmp_path):
    d = small_data()
    mc = tiny_model(dim=1)
    res = train(d, mc, TrainConfig(epochs=1, batch_size=2))
    save_checkpoint(res.state, tmp_path / "c.vcnp", mc, TrainConfig(epochs=1), {"config_hash": "abc"})
    ck = load_checkpoint(tmp_path / "c.vcnp")
    assert ck.model_cfg == mc and ck.meta == {"config_hash": "abc"}
    assert ck.state.step == res.state.step and ck.state.epoch == 1
    for n in res.state.params:
        assert ck.state.params[n].dtype == res.state.params[n].dtype
        assert torch.equal(ck.state.params[n], res.state.params[n])
        assert torch.equal(ck.state.m[n], res.state.m[n]) and torch.equal(ck.state.v[n], res.state.v[n])


def test_checkpoint_frozen_flags_survive(tmp_path):
    mc = ModelConfig(dim=2, d=16, heads=2, lff_trainable=False)
    state = TrainState.fresh(init_params(mc))
    save_checkpoint(state, tmp_path / "c.vcnp", mc)
    assert load_checkpoint(tmp_path / "c.vcnp").state.params.frozen == {"lff.Wr"}


def _saved(tmp_path):
    mc = tiny_model()
    save_checkpoint(TrainState.fresh(init_params(mc)), tmp_path / "c.vcnp", mc)
    return tmp_path / "c.vcnp"


def test_checkpoint_tampered_length(tmp_path):
    path = _saved(tmp_path)
    raw = path.read_bytes()
    path.write_bytes(raw[:-3])
    with pytest.raises(CheckpointError):
        load_checkpoint(path)
    path.write_bytes(raw + b"\0")
    with pytest.raises(CheckpointError, match="trailing"):
        load_checkpoint(path)


def test_checkpoint_wrong_version_and_magic(tmp_path):
    path = _saved(tmp_path)
    raw = bytearray(path.read_bytes())
    raw[4] = 99
    path.write_bytes(bytes(raw))
    with pytest.raises(CheckpointVersionError):
        load_checkpoint(path)
    raw[:4] = b"NOPE"
    path.write_bytes(bytes(raw))
    with pytest.raises(CheckpointError, match="magic"):
        load_checkpoint(path)
