import math

import numpy as np
import pytest

from hdteacher.metrics import evaluate, oracle_surface_metrics, overlap_metrics, surface_metrics


def brute_overlap(pred, ref, c):
    p = set(map(tuple, np.argwhere(pred == c)))
    r = set(map(tuple, np.argwhere(ref == c)))
    if not p and not r:
        return 1.0, 1.0
    return 2 * len(p & r) / (len(p) + len(r)), len(p & r) / len(p | r)


def test_identical_and_disjoint():
    a = np.zeros((4, 4, 4), np.uint8)
    a[1:3, 1:3, 1:3] = 1
    assert overlap_metrics(a, a, 1) == (1.0, 1.0)
    assert surface_metrics(a, a, 1, (1, 1, 1)) == (0.0, 0.0)
    b = np.zeros_like(a)
    b[0, 0, 0] = 1
    assert overlap_metrics(a, b, 1) == (0.0, 0.0)


def test_half_overlap_counts():
    pred = np.zeros(200, np.uint8)
    ref = np.zeros(200, np.uint8)
    pred[:100] = 1
    ref[50:150] = 1
    dice, jac = overlap_metrics(pred, ref, 1)
    assert dice == pytest.approx(0.5) and jac == pytest.approx(1 / 3)


def test_single_voxels_three_mm_apart():
    a = np.zeros((3, 3, 7), np.uint8)
    b = np.zeros_like(a)
    a[1, 1, 1] = 1
    b[1, 1, 4] = 1
    assert surface_metrics(a, b, 1, (1.0, 1.0, 1.0)) == (3.0, 3.0)
    # anisotropic: same offset along depth at 5 mm spacing
    c = np.zeros((5, 3, 3), np.uint8)
    d = np.zeros_like(c)
    c[0, 1, 1] = 1
    d[3, 1, 1] = 1
    assert surface_metrics(c, d, 1, (5.0, 0.4, 0.4)) == (15.0, 15.0)


def test_empty_class_handling():
    a = np.zeros((3, 3, 3), np.uint8)
    b = a.copy()
    b[1, 1, 1] = 1
    assert overlap_metrics(a, a, 1) == (1.0, 1.0)
    assert all(math.isnan(v) for v in surface_metrics(a, a, 1, (1, 1, 1)))
    assert overlap_metrics(a, b, 1) == (0.0, 0.0)
    assert all(math.isnan(v) for v in surface_metrics(a, b, 1, (1, 1, 1)))


def test_random_pairs_match_oracles(backend):
    rng = np.random.default_rng(21)
    for _ in range(15):
        dims = tuple(int(n) for n in rng.integers(2, 13, size=3))
        spacing = tuple(float(s) for s in rng.choice([0.4, 1.0, 2.5, 5.0], size=3))
        pred = (rng.random(dims) < rng.uniform(0.05, 0.7)).astype(np.uint8)
        ref = (rng.random(dims) < rng.uniform(0.05, 0.7)).astype(np.uint8)
        d, j = overlap_metrics(pred, ref, 1)
        bd, bj = brute_overlap(pred, ref, 1)
        assert abs(d - bd) <= 1e-9 and abs(j - bj) <= 1e-9
        assert abs(j - d / (2 - d)) <= 1e-9
        got = surface_metrics(pred, ref, 1, spacing)
        want = oracle_surface_metrics(pred, ref, 1, spacing)
        np.testing.assert_allclose(got, want, atol=1e-9, rtol=0)


def test_symmetry_and_spacing_scaling():
    rng = np.random.default_rng(3)
    pred = (rng.random((6, 8, 8)) < 0.3).astype(np.uint8)
    ref = (rng.random((6, 8, 8)) < 0.3).astype(np.uint8)
    sp = (2.0, 0.5, 0.5)
    h1, a1 = surface_metrics(pred, ref, 1, sp)
    h2, a2 = surface_metrics(ref, pred, 1, sp)
    assert h1 == pytest.approx(h2, abs=1e-12) and a1 == pytest.approx(a2, abs=1e-12)
    h3, a3 = surface_metrics(pred, ref, 1, tuple(3 * s for s in sp))
    assert h3 == pytest.approx(3 * h1, rel=1e-12) and a3 == pytest.approx(3 * a1, rel=1e-12)


def test_evaluate_report_means_skip_undefined():
    ref = np.zeros((4, 6, 6), np.uint8)
    ref[1:3, 1:4, 1:4] = 1
    ref[0, 5, 5] = 2
    pred = ref.copy()
    pred[0, 5, 5] = 0
    report = evaluate(pred, ref, 3, (1.0, 1.0, 1.0))
    assert report.per_class[1].dice == 1.0 and report.per_class[2].dice == 0.0
    assert math.isnan(report.per_class[2].hd95)
    assert report.mean.dice == 0.5 and report.mean.hd95 == 0.0
    assert set(report.as_dict()["per_class"]) == {"1", "2"}


def test_shape_mismatch():
    with pytest.raises(ValueError, match="shape mismatch"):
        overlap_metrics(np.zeros((2, 2)), np.zeros((2, 3)), 1)
