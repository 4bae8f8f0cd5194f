import copy
import dataclasses
import hashlib

import numpy as np
import pytest

from hdteacher import tensor as T
from hdteacher import trainer
from hdteacher.checkpoint import HdTeacherState, load_checkpoint, save_checkpoint
from hdteacher.losses import supervised_loss
from hdteacher.networks import DualDecoderNet, UNetConfig, forward_student
from hdteacher.trainer import (
    StageOrderError, TrainingDiverged, ema_update, infer, run_baseline, run_stage, sample_batch, snapshot,
)


def _fresh(cfg):
    return HdTeacherState.create(cfg.net2d, cfg.net3d, cfg.seed)


def _same(a, b):
    return all(np.array_equal(a[n], b[n]) for n in a)


def _digest(path):
    return hashlib.sha256(path.read_bytes()).hexdigest()


# ---------------------------------------------------------------- EMA

def test_ema_single_step_examples():
    cfg = UNetConfig(2, 1, 2, 4, 1)
    t = DualDecoderNet(cfg, T.make_rng(0), dtype=np.float64, teacher=True)
    s = DualDecoderNet(cfg, T.make_rng(1), dtype=np.float64)
    for p in t.params.values():
        p.data[...] = 0.0
    for p in s.params.values():
        p.data[...] = 1.0
    ema_update(t, s, 0.5)
    assert all(np.all(p.data == 0.5) for p in t.params.values())
    ema_update(t, s, 0.0)
    assert all(np.all(p.data == 1.0) for p in t.params.values())


def test_ema_geometric_decay_over_100_steps():
    cfg = UNetConfig(2, 1, 2, 4, 1)
    t = DualDecoderNet(cfg, T.make_rng(0), dtype=np.float64, teacher=True)
    s = DualDecoderNet(cfg, T.make_rng(1), dtype=np.float64)
    t0 = {n: p.data.copy() for n, p in t.params.items()}
    tau = 0.99
    for _ in range(100):
        ema_update(t, s, tau)
    for n, p in t.params.items():
        expect = s.params[n].data + tau ** 100 * (t0[n] - s.params[n].data)
        assert np.abs(p.data - expect).max() <= 1e-6


def test_ema_rejects_bad_inputs():
    a = DualDecoderNet(UNetConfig(2, 1, 2, 4, 1), T.make_rng(0))
    b = DualDecoderNet(UNetConfig(2, 1, 2, 8, 1), T.make_rng(0))
    with pytest.raises(ValueError, match="tau"):
        ema_update(a, a.copy(), 1.0)
    with pytest.raises(ValueError, match="shape"):
        ema_update(a, b, 0.9)


# ---------------------------------------------------------------- batches and schedules

def test_sample_batch_puts_labeled_first(tiny, tiny_split):
    rng = T.make_rng(0)
    x, labels, sdf, n = sample_batch(tiny_split, (4, 16, 16), 4, 0.5, rng)
    assert x.shape == (4, 1, 4, 16, 16) and n == 2
    assert labels.shape == (2, 4, 16, 16) and sdf.shape == (2, 2, 4, 16, 16)
    x, labels, _, n = sample_batch(tiny_split, (16, 16), 5, 0.5, rng)
    assert x.shape == (5, 1, 16, 16) and n == 2 and labels.shape == (2, 16, 16)


def test_lr_schedule_is_stepwise():
    cfg = trainer.StageConfig("2d", lr=0.1, lr_decay=0.1, lr_decay_every=2)
    assert [cfg.lr_at(e) for e in range(5)] == pytest.approx([0.1, 0.1, 0.01, 0.01, 0.001])


# ---------------------------------------------------------------- stage contracts

def test_stage_order_is_enforced(tiny, tiny_split):
    st = _fresh(tiny)
    with pytest.raises(StageOrderError, match="2d"):
        run_stage(st, tiny.stage("3d"), tiny_split)
    with pytest.raises(StageOrderError):
        run_stage(st, tiny.stage("hybrid"), tiny_split)
    with pytest.raises(StageOrderError, match="baseline"):
        run_baseline(st, tiny.baseline, tiny_split)
    run_stage(st, tiny.stage("2d"), tiny_split)
    with pytest.raises(StageOrderError, match="3d"):
        run_stage(st, tiny.stage("hybrid"), tiny_split)


def test_stage_touches_only_its_networks(tiny, tiny_split):
    st = _fresh(tiny)
    before = snapshot([st.student3d, st.teacher3d, st.student2d])
    run_stage(st, tiny.stage("2d"), tiny_split)
    after = snapshot([st.student3d, st.teacher3d, st.student2d])
    assert _same(before[0], after[0]) and _same(before[1], after[1])
    assert not _same(before[2], after[2])
    assert st.frozen2d and st.completed == ["2d"]


def test_2d_nets_are_bit_frozen_through_every_3d_step(tiny, tiny_split, monkeypatch):
    st = _fresh(tiny)
    run_stage(st, tiny.stage("2d"), tiny_split)
    frozen = snapshot([st.student2d, st.teacher2d])
    inner = trainer.STEP_FNS["3d"]
    calls = []

    def checked(state, *a):
        br = inner(state, *a)
        now = snapshot([state.student2d, state.teacher2d])
        calls.append(_same(frozen[0], now[0]) and _same(frozen[1], now[1]))
        return br

    monkeypatch.setitem(trainer.STEP_FNS, "3d", checked)
    s3 = snapshot([st.student3d])
    run_stage(st, tiny.stage("3d"), tiny_split)
    assert len(calls) == tiny.stage("3d").total_steps and all(calls)
    assert not _same(s3[0], snapshot([st.student3d])[0])


def test_hybrid_stage_updates_both_students(tiny, tiny_split):
    st = _fresh(tiny)
    for name in ("2d", "3d"):
        run_stage(st, tiny.stage(name), tiny_split)
    before = snapshot([st.student2d, st.student3d])
    run_stage(st, dataclasses.replace(tiny.stage("hybrid"), validate=False), tiny_split)
    after = snapshot([st.student2d, st.student3d])
    assert not _same(before[0], after[0]) and not _same(before[1], after[1])
    assert st.completed == ["2d", "3d", "hybrid"] and not st.frozen2d


def test_zero_lambda_step_is_a_supervised_step(tiny, tiny_split):
    cfg = tiny.stage("2d")
    st = _fresh(tiny)
    ref = copy.deepcopy(st)
    trainer._step_2d(st, cfg, tiny_split, 0.0, cfg.lr)
    # independent replay: same draws, loss from the supervised terms only
    x, labels, sdf, n = sample_batch(tiny_split, cfg.patch_2d, cfg.batch_2d, cfg.labeled_fraction, ref.rng)
    out = forward_student(ref.student2d, x, cfg.noise_sigma, ref.rng)
    d, m = supervised_loss(out.seg_probs[:n], labels, out.sdf_pred[:n], sdf)
    (d + m).backward()
    T.sgd_step(ref.student2d.parameters(), cfg.lr)
    for name, p in st.student2d.params.items():
        np.testing.assert_allclose(p.data, ref.student2d.params[name].data, rtol=1e-5, atol=1e-6)


def test_seeded_runs_are_byte_identical(tiny, tiny_split, tmp_path):
    digests = []
    for run in ("a", "b"):
        st = _fresh(tiny)
        for name in ("2d", "3d"):
            run_stage(st, tiny.stage(name), tiny_split, log_path=tmp_path / run / f"{name}.csv")
        save_checkpoint(st, tmp_path / run / "ck")
        digests.append([_digest(tmp_path / run / f) for f in ("2d.csv", "3d.csv", "ck/params.f32",
                                                               "ck/manifest.json")])
    assert digests[0] == digests[1]


def test_resume_matches_uninterrupted_run(tiny, tiny_split, tmp_path):
    st = _fresh(tiny)
    run_stage(st, tiny.stage("2d"), tiny_split)
    save_checkpoint(st, tmp_path / "after2d")
    run_stage(st, tiny.stage("3d"), tiny_split)
    save_checkpoint(st, tmp_path / "straight")
    resumed = load_checkpoint(tmp_path / "after2d")
    run_stage(resumed, tiny.stage("3d"), tiny_split)
    save_checkpoint(resumed, tmp_path / "resumed")
    assert _digest(tmp_path / "straight" / "params.f32") == _digest(tmp_path / "resumed" / "params.f32")


def test_csv_log_columns(tiny, tiny_split, tmp_path):
    st = _fresh(tiny)
    run_stage(st, tiny.stage("2d"), tiny_split, log_path=tmp_path / "2d.csv")
    lines = (tmp_path / "2d.csv").read_text().splitlines()
    assert lines[0].split(",") == list(trainer.LOG_FIELDS)
    assert len(lines) == 1 + tiny.stage("2d").epochs
    last = dict(zip(trainer.LOG_FIELDS, lines[-1].split(",")))
    assert float(last["lambda"]) == pytest.approx(0.1) and int(last["step"]) == tiny.stage("2d").total_steps


def test_divergence_aborts_with_dump(tiny, tiny_split, tmp_path):
    st = _fresh(tiny)
    next(iter(st.student2d.params.values())).data[...] = np.nan
    with pytest.raises(TrainingDiverged, match="diagnostics"):
        run_stage(st, tiny.stage("2d"), tiny_split, dump_dir=tmp_path)
    assert list(tmp_path.glob("diverged_2d_step0.json"))


def test_baseline_trains_supervised_only(tiny, tiny_split):
    cfg3 = tiny.net3d
    base = HdTeacherState.create(None, UNetConfig(3, 1, 2, cfg3.base_features, cfg3.depth), 0, kind="baseline")
    before = snapshot([base.student3d])
    rep = run_baseline(base, tiny.baseline, tiny_split)
    assert not _same(before[0], snapshot([base.student3d])[0])
    assert all(r["consistency_seg"] == 0 and r["lambda"] == 0 for r in rep.history)
    res = infer(base, tiny_split.test[0].image)
    assert res.labels.shape == tiny_split.test[0].image.shape


# ---------------------------------------------------------------- inference

@pytest.fixture(scope="module")
def trained():
    from conftest import tiny_config
    from hdteacher.data import build_split
    cfg = tiny_config()
    s = cfg.split
    split = build_split(cfg.data, s.n_labeled, s.n_unlabeled, s.n_val, s.n_test)
    st = HdTeacherState.create(cfg.net2d, cfg.net3d, 0)
    for name in ("2d", "3d"):
        run_stage(st, cfg.stage(name), split)
    return st, split


@pytest.mark.parametrize("mode", ["2d", "3d", "hybrid"])
def test_infer_outputs(trained, mode):
    st, split = trained
    vol = split.test[0].image
    res = infer(st, vol, 2, mode=mode, k=2, seed=3)
    assert res.probs.shape == (2,) + vol.shape and res.sdf.shape == (2,) + vol.shape
    np.testing.assert_allclose(res.probs.sum(axis=0), 1.0, atol=1e-5)
    np.testing.assert_array_equal(res.labels, res.probs.argmax(axis=0))
    assert 0 <= res.seg_uncertainty.min() and res.seg_uncertainty.max() <= 1 + 1e-6
    assert np.all(np.abs(res.sdf) <= 1)
    again = infer(st, vol, 2, mode=mode, k=2, seed=3)
    np.testing.assert_array_equal(again.probs, res.probs)


def test_infer_defaults_and_errors(trained, tiny):
    st, split = trained
    vol = split.test[0].image
    np.testing.assert_array_equal(infer(st, vol, 2, k=2).probs, infer(st, vol, 2, mode="3d", k=2).probs)
    with pytest.raises(RuntimeError, match="untrained"):
        infer(_fresh(tiny), vol)
    with pytest.raises(ValueError, match="volume"):
        infer(st, vol[0], 2, mode="2d")
    with pytest.raises(ValueError, match="mode"):
        infer(st, vol, 2, mode="4d")
