import importlib
import json

import numpy as np
import pytest

from appode import tensor as T
from appode.data import growing_disks, rusting_ramp
from appode.exemplar import Exemplar
from appode.field import init_params
from appode.latent import RGB
from appode.losses import FeatureBank, global_loss
from appode.ode import StiffnessError
from appode.ops import make_rng
from appode.train import (
    OptimizerState,
    TrainConfig,
    Trainer,
    adam_step,
    load_checkpoint,
    plateau_update,
    sample_supervision_time,
    train,
)
from appode.archive import save_archive

train_mod = importlib.import_module("appode.train")


def tiny_rgb(**kw):
    cfg = TrainConfig.rgb(**{"iterations": 12, "lr": 2e-3, "seed": 3, **kw})
    ex = growing_disks(size=16, n_frames=6, cells=2)
    return cfg, ex, cfg.field_config(desk=True)


def tiny_svbrdf(**kw):
    cfg = TrainConfig.svbrdf(**{"iterations": 6, "init_iterations": 3, "lr": 1e-3, "n_crops": 2, "n_shuffles": 2, "n_slices": 8, **kw})
    ex = rusting_ramp(size=32, n_frames=4)
    return cfg, ex, cfg.field_config(desk=True)


# config -------------------------------------------------------------------------


def test_defaults():
    rgb, sv = TrainConfig.rgb(), TrainConfig.svbrdf()
    assert (rgb.iterations, rgb.lr, rgb.refresh_rate) == (50000, 5e-4, 6)
    assert (rgb.t_warmup, rgb.t_start, rgb.t_end) == (-1.0, 0.0, 5.0)
    assert (sv.iterations, sv.init_iterations, sv.t_warmup, sv.t_start, sv.t_end) == (60000, 20000, -2.0, 0.0, 10.0)
    assert rgb.warmup_ratio == pytest.approx(0.2) and sv.warmup_ratio == pytest.approx(0.2)
    assert rgb.plateau_patience == 2500


@pytest.mark.parametrize("kw", [{"refresh_rate": 1}, {"t_warmup": 0.0}, {"t_end": -0.5}, {"mode": "gray"}])
def test_config_invariants(kw):
    with pytest.raises(ValueError):
        TrainConfig(**kw)


def test_config_round_trip():
    cfg = TrainConfig.svbrdf(lr=1e-3)
    assert TrainConfig.from_dict(cfg.to_dict()) == cfg


# supervision times ---------------------------------------------------------------


def test_strata_examples():
    r = make_rng(0)
    for _ in range(200):
        assert 0.0 <= sample_supervision_time(1, 0.0, 5.0, 6, r) <= 1.0
        assert 4.0 <= sample_supervision_time(5, 0.0, 5.0, 6, r) <= 5.0
    for k in (0, 6):
        with pytest.raises(ValueError):
            sample_supervision_time(k, 0.0, 5.0, 6, r)


def test_strata_partition_interval():
    edges = []
    for k in range(1, 6):
        draws = [sample_supervision_time(k, 0.0, 5.0, 6, make_rng(k * 100 + j)) for j in range(300)]
        edges.append((min(draws), max(draws)))
    for k, (lo, hi) in enumerate(edges, start=1):
        assert k - 1 <= lo and hi <= k
        assert lo < k - 1 + 0.05 and hi > k - 0.05


def test_strata_monte_carlo_mean():
    r = make_rng(42)
    draws = np.array([sample_supervision_time(3, 0.0, 5.0, 6, r) for _ in range(10_000)])
    assert draws.min() >= 2.0 and draws.max() <= 3.0
    assert abs(draws.mean() - 2.5) < 0.02


# Adam -----------------------------------------------------------------------------


def test_adam_zero_gradient_keeps_params():
    p = {"a": T.parameter(np.array([1.0, -2.0], dtype=np.float32))}
    p["a"].grad = np.zeros(2)
    before = p["a"].data.copy()
    assert adam_step(p, OptimizerState(lr=0.1))
    np.testing.assert_array_equal(p["a"].data, before)


def test_adam_first_step_is_lr_sized():
    p = {"a": T.parameter(np.array([1.0, -2.0, 0.5], dtype=np.float32))}
    p["a"].grad = np.array([0.3, -7.0, 1e-3])
    before = p["a"].data.copy()
    adam_step(p, OptimizerState(lr=0.01))
    np.testing.assert_allclose(before - p["a"].data, 0.01 * np.sign([0.3, -7.0, 1e-3]), rtol=1e-4)


def test_adam_quadratic_bowl():
    target = np.array([0.5, -1.5, 2.0], dtype=np.float32)
    p = {"x": T.parameter(np.zeros(3, dtype=np.float32))}
    opt = OptimizerState(lr=0.05)
    losses = []
    for _ in range(50):
        p["x"].grad = None
        d = p["x"] - T.Tensor(target)
        loss = T.tsum(d * d)
        T.backward(loss)
        losses.append(loss.item())
        adam_step(p, opt)
    assert all(b < a for a, b in zip(losses[5:], losses[6:]))


def test_adam_skips_non_finite():
    p = {"a": T.parameter(np.ones(2, dtype=np.float32)), "b": T.parameter(np.ones(2, dtype=np.float32))}
    p["a"].grad = np.array([1.0, np.nan])
    p["b"].grad = np.ones(2)
    opt = OptimizerState(lr=0.1)
    assert not adam_step(p, opt)
    assert opt.step == 0 and np.all(p["b"].data == 1)


# plateau schedule -------------------------------------------------------------------


def halving_oracle(trace, patience, threshold=0.01):
    """Plain replay of the halve-on-plateau rule for unsmoothed losses."""
    best, since, events = float("inf"), 0, []
    for i, x in enumerate(trace):
        if x < best * (1 - threshold):
            best, since = x, 0
            continue
        since += 1
        if since >= patience:
            events.append(i)
            since = 0
    return events


def test_plateau_never_halves_on_decreasing_loss():
    opt = OptimizerState(lr=1.0)
    for i in range(500):
        plateau_update(opt, 10.0 * 0.97**i, patience=5, iteration=i)
    assert opt.lr == 1.0 and opt.lr_events == []


def test_plateau_one_halving_after_patience():
    opt = OptimizerState(lr=1.0)
    for i in range(11):
        plateau_update(opt, 3.0, patience=10, window=1, iteration=i)
    assert opt.lr == 0.5 and opt.lr_events == [10]


def test_plateau_two_plateaus_replay():
    trace = [5.0 * 0.9**i for i in range(30)] + [0.2] * 40 + [0.2 * 0.8**i for i in range(20)] + [0.003] * 35
    opt = OptimizerState(lr=1.0)
    for i, x in enumerate(trace):
        plateau_update(opt, x, patience=30, window=1, iteration=i)
    want = halving_oracle(trace, 30)
    assert len(want) == 2
    assert opt.lr_events == want and opt.lr == 0.25


# trainer --------------------------------------------------------------------------


def test_zero_iterations_returns_initial_field():
    cfg, ex, fcfg = tiny_rgb(iterations=0)
    params, report = train(cfg, ex, fcfg)
    ref = init_params(fcfg, cfg.seed)
    for k in ref:
        np.testing.assert_array_equal(params[k].data, ref[k].data)
    assert np.all(params["out.w"].data == 0) and report["losses"] == []


def test_first_iteration_is_refresh_with_noise_loss():
    cfg, ex, fcfg = tiny_rgb()
    tr = Trainer(cfg, ex, fcfg)
    rng = make_rng(cfg.seed + 1)
    noise = rng.standard_normal((12, 16, 16), dtype=np.float32)
    want = global_loss(T.Tensor(noise[:3]), ex.frames[0], tr.bank, rng, cfg.n_slices).item()
    rec = tr.step()
    assert (rec["t0"], rec["t1"]) == (cfg.t_warmup, cfg.t_start)
    assert rec["loss"] == pytest.approx(want, rel=1e-6) and rec["loss"] > 0


def test_refresh_cycle_structure():
    cfg, ex, fcfg = tiny_rgb()
    tr = Trainer(cfg, ex, fcfg)
    recs = tr.run(12)
    width = (cfg.t_end - cfg.t_start) / (cfg.refresh_rate - 1)
    for r in recs:
        k = r["iteration"] % cfg.refresh_rate
        if k == 0:
            assert (r["t0"], r["t1"]) == (cfg.t_warmup, cfg.t_start)
        else:
            assert cfg.t_start + width * (k - 1) <= r["t1"] <= cfg.t_start + width * k
            assert r["t0"] == recs[r["iteration"] - 1]["t1"]
    first_frame = sum(1 for r in recs if r["t1"] == cfg.t_start)
    assert first_frame / len(recs) >= 1 / cfg.refresh_rate


def test_tape_size_independent_of_iteration():
    cfg, ex, fcfg = tiny_rgb(iterations=18)
    tr = Trainer(cfg, ex, fcfg)
    recs = tr.run()
    pairs = {(r["accepted"], r["nodes"]) for r in recs}
    # every accepted step adds the same number of nodes; the loss adds a constant
    by_steps = {}
    for a, n in pairs:
        by_steps.setdefault(a, set()).add(n)
    assert all(len(v) == 1 for v in by_steps.values())
    if len(by_steps) >= 2:
        (a0, n0), (a1, n1) = sorted((a, v.pop()) for a, v in by_steps.items())[:2]
        per = (n1 - n0) / (a1 - a0)
        base = n0 - per * a0
        assert all(n == base + per * a for a, n in pairs)
    assert max(r["nodes"] for r in recs[12:]) <= max(r["nodes"] for r in recs) and tr.carried.data.requires_grad is False


def test_determinism_same_seed():
    cfg, ex, fcfg = tiny_rgb(iterations=100)
    a = [r["loss"] for r in Trainer(cfg, ex, fcfg).run()]
    b = [r["loss"] for r in Trainer(cfg, ex, fcfg).run()]
    assert a == b


def test_resume_matches_uninterrupted(tmp_path):
    cfg, ex, fcfg = tiny_rgb(iterations=40)
    full = Trainer(cfg, ex, fcfg)
    full.run()
    half = Trainer(cfg, ex, fcfg)
    half.run(20)
    half.save(tmp_path / "ckpt.nap")
    resumed = Trainer.load(tmp_path / "ckpt.nap", ex)
    resumed.run(20)
    assert [r["loss"] for r in resumed.history] == [r["loss"] for r in full.history[20:]]
    for k in full.params:
        np.testing.assert_array_equal(resumed.params[k].data, full.params[k].data)


def test_report_file(tmp_path):
    cfg, ex, fcfg = tiny_rgb(iterations=4)
    path = tmp_path / "report.jsonl"
    Trainer(cfg, ex, fcfg, report_path=path).run()
    lines = [json.loads(x) for x in path.read_text().splitlines()]
    assert [r["iteration"] for r in lines] == [0, 1, 2, 3]
    for r in lines:
        assert {"loss", "lr", "nfe", "wall"} <= r.keys()


def test_stiffness_aborts_iteration(monkeypatch):
    cfg, ex, fcfg = tiny_rgb()
    tr = Trainer(cfg, ex, fcfg)
    tr.run(2)
    before = {k: p.data.copy() for k, p in tr.params.items()}

    def boom(*a, **k):
        raise StiffnessError("step underflow", 0.3)

    monkeypatch.setattr(train_mod, "solve_adaptive", boom)
    rec = tr.step()
    assert "aborted" in rec and tr.carried is None
    for k, p in tr.params.items():
        np.testing.assert_array_equal(p.data, before[k])
    monkeypatch.undo()
    rec = tr.step()
    assert rec["t0"] == cfg.t_warmup and "loss" in rec


def test_checkpoint_validation(tmp_path):
    save_archive(tmp_path / "plain.nap", {"x": np.zeros(2)}, {"kind": "maps"})
    with pytest.raises(ValueError, match="not a checkpoint"):
        load_checkpoint(tmp_path / "plain.nap")
    save_archive(tmp_path / "new.nap", {"x": np.zeros(2)}, {"kind": "checkpoint", "format_version": 99})
    with pytest.raises(ValueError, match="newer"):
        load_checkpoint(tmp_path / "new.nap")


def test_nearest_frame_lookup():
    frames = np.stack([np.full((3, 2, 2), v, dtype=np.float32) for v in (0.1, 0.5, 0.9)])
    ex = Exemplar(frames, [0.0, 2.5, 5.0], RGB)
    assert ex.frame_at(1.2)[0, 0, 0] == pytest.approx(0.1)
    assert ex.frame_at(1.3)[0, 0, 0] == pytest.approx(0.5)
    assert ex.frame_at(9.0)[0, 0, 0] == pytest.approx(0.9)


def test_mode_mismatch():
    cfg, _, fcfg = tiny_rgb()
    with pytest.raises(ValueError, match="mode"):
        Trainer(cfg, rusting_ramp(size=16, n_frames=2), fcfg)


# svBRDF schedule ---------------------------------------------------------------------


def test_svbrdf_phases_exclusive_and_bank_frozen():
    cfg, ex, fcfg = tiny_svbrdf()
    bank = FeatureBank.random(0)
    snapshot = [w.tobytes() for w in bank.kernels + bank.biases]
    tr = Trainer(cfg, ex, fcfg, bank=bank)
    li = float(tr.params["log_intensity"].data)
    recs = tr.run()
    assert [r["phase"] for r in recs] == ["init"] * 3 + ["local"] * 3
    for i in range(cfg.iterations):
        w = tr.weights(i)
        assert len(w.active) == 1
    assert [w.tobytes() for w in bank.kernels + bank.biases] == snapshot
    assert float(tr.params["log_intensity"].data) != li
    assert tr.state_hw == (16, 16)
