import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from hdteacher.losses import (
    consistency_loss, dice_loss, one_hot, stage_loss, supervised_loss, warmup_lambda,
)
from hdteacher.networks import StudentOutput
from hdteacher.tensor import Tensor
from hdteacher.uncertainty import FusedPrediction


def T64(a):
    return Tensor(np.asarray(a, dtype=np.float64))


def dice_oracle(probs, labels, eps=1e-5):
    """Loop-based soft Dice loss with per-class sums pooled over the batch."""
    b, c = probs.shape[:2]
    per_class = []
    for k in range(c):
        inter = psum = ysum = 0.0
        for i in range(b):
            p = probs[i, k].ravel()
            y = (labels[i].ravel() == k).astype(float)
            inter += sum(pi * yi for pi, yi in zip(p, y))
            psum += sum(p)
            ysum += sum(y)
        per_class.append((2 * inter + eps) / (psum + ysum + eps))
    return 1 - sum(per_class) / c


def test_dice_perfect_and_disjoint():
    labels = np.array([[[0, 1], [1, 0]]])
    assert dice_loss(T64(one_hot(labels, 2)), labels).item() <= 1e-4
    assert dice_loss(T64(one_hot(1 - labels, 2)), labels).item() >= 1 - 1e-4


def test_dice_uniform_half_foreground_closed_form():
    labels = np.zeros((1, 4, 4), dtype=int)
    labels[0, :2] = 1
    probs = np.full((1, 2, 4, 4), 0.5)
    # each class: 2*(0.5*8) / (8 + 8) = 0.5
    got = dice_loss(T64(probs), labels).item()
    assert got == pytest.approx(dice_oracle(probs, labels), abs=1e-12)
    assert got == pytest.approx(1 - (8 + 1e-5) / (16 + 1e-5), abs=1e-12)


def test_dice_random_and_permutation():
    rng = np.random.default_rng(0)
    probs = rng.dirichlet([1, 1, 1], size=(2, 3, 4)).transpose(0, 3, 1, 2)
    labels = rng.integers(0, 3, size=(2, 3, 4))
    got = dice_loss(T64(probs), labels).item()
    assert got == pytest.approx(dice_oracle(probs, labels), abs=1e-12)
    assert 0 <= got <= 1
    perm = np.array([2, 0, 1])
    relabeled = np.argsort(perm)[labels]
    assert dice_loss(T64(probs[:, perm]), relabeled).item() == pytest.approx(got, abs=1e-12)


def test_supervised_loss_components():
    labels = np.array([[[0, 1], [1, 1]]])
    z = np.random.default_rng(1).uniform(-1, 1, size=(1, 2, 2, 2))
    d, m = supervised_loss(T64(one_hot(labels, 2)), labels, T64(z), z)
    assert d.item() + m.item() <= 1e-4
    _, m = supervised_loss(T64(one_hot(labels, 2)), labels, T64(z + 0.1), z)
    assert m.item() == pytest.approx(0.01)
    with pytest.raises(ValueError, match="at least one"):
        supervised_loss(T64(np.zeros((0, 2, 2, 2))), np.zeros((0, 2, 2)), T64(np.zeros((0, 2, 2, 2))),
                        np.zeros((0, 2, 2, 2)))


def test_supervised_loss_random_batch_oracle():
    rng = np.random.default_rng(2)
    probs = rng.dirichlet([1, 1], size=(3, 4, 4)).transpose(0, 3, 1, 2)
    labels = rng.integers(0, 2, size=(3, 4, 4))
    zp, zt = rng.uniform(-1, 1, size=(2, 3, 2, 4, 4))
    d, m = supervised_loss(T64(probs), labels, T64(zp), zt)
    mse_oracle = sum((a - b) ** 2 for a, b in zip(zp.ravel(), zt.ravel())) / zp.size
    assert d.item() + m.item() == pytest.approx(dice_oracle(probs, labels) + mse_oracle, abs=1e-6)


def test_consistency_cases():
    s = np.random.default_rng(3).random((2, 2, 3, 3))
    fused = FusedPrediction("seg", s, np.zeros((2, 1, 3, 3)))
    assert consistency_loss(T64(s), fused).item() == 0.0
    shifted = FusedPrediction("seg", s + 0.3, np.zeros((2, 1, 3, 3)))
    assert consistency_loss(T64(s), shifted).item() == pytest.approx(0.09)
    muted = FusedPrediction("seg", s + 0.3, np.full((2, 1, 3, 3), 1e3))
    assert consistency_loss(T64(s), muted).item() < 1e-300
    with pytest.raises(ValueError, match="shape mismatch"):
        consistency_loss(T64(s[:1]), fused)


def test_warmup_values():
    assert warmup_lambda(100, 100) == 0.1
    assert warmup_lambda(0, 100) == pytest.approx(0.1 * math.exp(-5), abs=1e-12)
    assert warmup_lambda(0, 100) == pytest.approx(6.7379e-4, abs=1e-8)
    assert warmup_lambda(50, 100) == pytest.approx(0.02865, abs=1e-5)
    assert warmup_lambda(500, 100) == 0.1


@settings(max_examples=50, deadline=None)
@given(st.integers(1, 5000))
def test_warmup_strictly_increasing(imax):
    vals = [warmup_lambda(i, imax) for i in range(0, imax + 1, max(1, imax // 50))]
    assert all(b > a for a, b in zip(vals, vals[1:]))
    assert 0.1 * math.exp(-5) - 1e-15 <= vals[0] and vals[-1] <= 0.1


def _random_stage_inputs(rng, b=2, c=2, sp=(4, 4)):
    def out():
        probs = rng.dirichlet([1] * c, size=(b,) + sp)
        probs = np.moveaxis(probs, -1, 1)
        return StudentOutput(T64(probs), T64(rng.uniform(-1, 1, size=(b, c) + sp)), None, None)

    seg_t = np.moveaxis(rng.dirichlet([1] * c, size=(b,) + sp), -1, 1)
    fs = FusedPrediction("seg", seg_t, rng.random((b, 1) + sp))
    fz = FusedPrediction("sdf", rng.uniform(-1, 1, size=(b, c) + sp), rng.random((b, c) + sp) * 0.1)
    labels = rng.integers(0, c, size=(1,) + sp)
    ztarget = rng.uniform(-1, 1, size=(1, c) + sp)
    return out, fs, fz, labels, ztarget


@pytest.mark.parametrize("stage", ["2d", "3d", "hybrid"])
def test_stage_composition_identity(stage):
    rng = np.random.default_rng(4)
    for _ in range(5):
        out, fs, fz, labels, zt = _random_stage_inputs(rng)
        lam = float(rng.uniform(0, 0.1))
        kw = dict(lam=lam, labels=labels, sdf_target=zt, n_labeled=1,
                  student=out(), seg_fused=fs, sdf_fused=fz)
        if stage == "hybrid":
            kw.update(student2d=out(), alpha=float(rng.uniform(0, 1)))
        br = stage_loss(stage, **kw)
        recomposed = br.supervised_seg + br.supervised_sdf + lam * (br.consistency_seg + br.consistency_sdf)
        assert abs(br.total - recomposed) <= 1e-6
        if stage == "hybrid":
            h3, h2 = br.parts["3d"], br.parts["2d"]
            assert abs(br.total - (h3.total + kw["alpha"] * h2.total)) <= 1e-6


def test_hybrid_alpha_zero_and_lambda_zero():
    rng = np.random.default_rng(5)
    out, fs, fz, labels, zt = _random_stage_inputs(rng)
    s3 = out()
    br = stage_loss("hybrid", lam=0.05, labels=labels, sdf_target=zt, n_labeled=1, student=s3,
                    seg_fused=fs, sdf_fused=fz, student2d=out(), alpha=0.0)
    only3 = stage_loss("3d", lam=0.05, labels=labels, sdf_target=zt, n_labeled=1, student=s3,
                       seg_fused=fs, sdf_fused=fz)
    assert br.total == pytest.approx(only3.total, abs=1e-12)
    nolam = stage_loss("3d", lam=0.0, labels=labels, sdf_target=zt, n_labeled=1, student=s3,
                       seg_fused=fs, sdf_fused=fz)
    assert nolam.total == pytest.approx(nolam.supervised_seg + nolam.supervised_sdf, abs=1e-12)


def test_stage_loss_errors():
    with pytest.raises(ValueError, match="needs student"):
        stage_loss("2d", lam=0.1, labels=None, sdf_target=None, n_labeled=1)
    rng = np.random.default_rng(6)
    out, fs, fz, labels, zt = _random_stage_inputs(rng)
    with pytest.raises(ValueError, match="2D student"):
        stage_loss("hybrid", lam=0.1, labels=labels, sdf_target=zt, n_labeled=1, student=out(),
                   seg_fused=fs, sdf_fused=fz)


def test_sdf_weight_zero_drops_sdf_terms():
    rng = np.random.default_rng(7)
    out, fs, fz, labels, zt = _random_stage_inputs(rng)
    br = stage_loss("2d", lam=0.1, labels=labels, sdf_target=zt, n_labeled=1, student=out(),
                    seg_fused=fs, sdf_fused=fz, sdf_weight=0.0)
    assert br.supervised_sdf == 0.0 and br.consistency_sdf == 0.0
