import numpy as np
import pytest

from hdteacher.sdf import LabelVolume, boundary_mask, compute_sdf, oracle_sdf, sdf_channels


def test_absent_and_full_classes():
    labels = np.zeros((4, 5, 6), dtype=np.uint8)
    np.testing.assert_array_equal(compute_sdf(labels, 1), 1.0)
    np.testing.assert_array_equal(compute_sdf(labels, 0), -1.0)
    np.testing.assert_array_equal(oracle_sdf(labels, 1), 1.0)
    np.testing.assert_array_equal(oracle_sdf(labels, 0), -1.0)


def test_single_voxel(backend):
    labels = np.zeros((5, 5, 5), dtype=np.uint8)
    labels[2, 2, 2] = 1
    field = compute_sdf(labels, 1)
    assert field[2, 2, 2] == 0.0
    for offset in [(1, 0, 0), (-1, 0, 0), (0, 1, 0), (0, -1, 0), (0, 0, 1), (0, 0, -1)]:
        assert field[tuple(np.add((2, 2, 2), offset))] > 0
    np.testing.assert_allclose(field, oracle_sdf(labels, 1), atol=1e-9, rtol=0)
    # farthest voxel is a corner at distance sqrt(12) -> +1
    assert field[0, 0, 0] == pytest.approx(1.0)
    assert field[2, 2, 1] == pytest.approx(1 / np.sqrt(12))


def test_two_voxel_bar_is_all_boundary():
    labels = np.zeros((3, 4, 3), dtype=np.uint8)
    labels[1, 1:3, 1] = 1
    field = oracle_sdf(labels, 1)
    assert field[1, 1, 1] == 0 and field[1, 2, 1] == 0
    np.testing.assert_allclose(compute_sdf(labels, 1), field, atol=1e-9)


def test_anisotropic_spacing_depth_is_farther():
    labels = np.zeros((5, 7, 7), dtype=np.uint8)
    labels[2, 2:5, 2:5] = 1
    spacing = (5.0, 0.4, 0.4)
    field_raw = compute_sdf(labels, 1, spacing)
    # neighbour above the slab (depth) lies 5 mm away, in-plane neighbour 0.4 mm
    assert field_raw[1, 3, 3] > field_raw[2, 3, 1]
    np.testing.assert_allclose(field_raw, oracle_sdf(labels, 1, spacing), atol=1e-9)


def test_random_masks_match_oracle(backend):
    rng = np.random.default_rng(5)
    for trial in range(12):
        dims = tuple(int(n) for n in rng.integers(2, 9, size=3))
        spacing = tuple(rng.choice([0.4, 1.0, 5.0], size=3))
        labels = (rng.random(dims) < rng.uniform(0.05, 0.6)).astype(np.uint8)
        for c in (0, 1):
            np.testing.assert_allclose(compute_sdf(labels, c, spacing),
                                       oracle_sdf(labels, c, spacing), atol=1e-9, rtol=0)


def test_sign_and_zero_set_properties():
    rng = np.random.default_rng(9)
    labels = (rng.random((6, 10, 10)) < 0.3).astype(np.uint8)
    field = compute_sdf(labels, 1, (2.0, 1.0, 1.0))
    fg = labels == 1
    bnd = boundary_mask(fg)
    assert np.all(np.abs(field) <= 1)
    assert np.all(field[~fg] > 0)
    assert np.all(field[fg & ~bnd] < 0)
    np.testing.assert_array_equal(field == 0, bnd)


def test_translation_equivariance_interior_mask():
    labels = np.zeros((8, 12, 12), dtype=np.uint8)
    labels[3:5, 4:7, 4:6] = 1
    shifted = np.roll(labels, (1, 2, 1), axis=(0, 1, 2))
    a = compute_sdf(labels, 1)
    b = compute_sdf(shifted, 1)
    # interior (negative) part is unaffected by the volume edges
    np.testing.assert_allclose(np.roll(np.minimum(a, 0), (1, 2, 1), axis=(0, 1, 2)), np.minimum(b, 0))


def test_label_volume_and_channels():
    labels = np.zeros((4, 4, 4), dtype=np.uint8)
    labels[1:3, 1:3, 1:3] = 2
    vol = LabelVolume(labels, (1.0, 1.0, 1.0), 3)
    chans = sdf_channels(vol, 3)
    assert chans.shape == (3, 4, 4, 4) and chans.dtype == np.float32
    np.testing.assert_array_equal(chans[1], 1.0)
    with pytest.raises(ValueError):
        LabelVolume(labels, (1.0, 1.0, 1.0), 2)


def test_oracle_size_limit():
    with pytest.raises(ValueError, match="at most"):
        oracle_sdf(np.zeros((33, 32, 32), dtype=np.uint8), 0)
