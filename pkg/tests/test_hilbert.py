import itertools

import numpy as np
import pytest

from ustssm.hilbert import AXIS_ORDERS, axis_order_key, curve_keys, hilbert_index, quantize


def lattice(bits):
    side = np.arange(1 << bits)
    return np.array(list(itertools.product(side, side, side)))


@pytest.mark.parametrize("bits", range(1, 17))
def test_origin_is_zero(bits):
    assert hilbert_index(np.zeros(3, int), bits) == 0


@pytest.mark.parametrize("bits", range(1, 6))
def test_bijective_on_full_lattice(bits):
    h = hilbert_index(lattice(bits), bits)
    assert h.min() == 0 and h.max() == 8**bits - 1
    assert len(np.unique(h)) == 8**bits


@pytest.mark.parametrize("bits", range(1, 4))
def test_consecutive_indices_are_adjacent(bits):
    pts = lattice(bits)
    order = pts[np.argsort(hilbert_index(pts, bits))]
    steps = np.abs(np.diff(order, axis=0)).sum(axis=1)
    assert np.all(steps == 1)


def test_bits1_corners_cover_octants():
    corners = lattice(1)
    assert sorted(hilbert_index(corners, 1)) == list(range(8))


def test_hilbert_rejects_out_of_range():
    with pytest.raises(ValueError):
        hilbert_index(np.array([4, 0, 0]), 2)
    with pytest.raises(ValueError):
        hilbert_index(np.array([-1, 0, 0]), 2)
    with pytest.raises(ValueError):
        hilbert_index(np.zeros(3, int), 0)


def test_quantize_examples():
    corners = lattice(1).astype(float) * 3.5 - 1.0
    assert np.array_equal(quantize(corners, 1), lattice(1))
    assert np.array_equal(quantize(np.full((5, 3), 2.0), 8), np.zeros((5, 3), int))
    xs = np.sort(np.random.default_rng(0).uniform(size=50))
    q = quantize(np.c_[xs, xs * 0, xs * 0], 6)
    assert np.all(np.diff(q[:, 0]) >= 0)
    assert q.max() <= 63 and q.min() == 0
    with pytest.raises(ValueError):
        quantize(np.array([[np.nan, 0, 0]]), 4)
    with pytest.raises(ValueError):
        quantize(np.zeros((2, 3)), 17)


def test_axis_key_matches_lexicographic_sort():
    rng = np.random.default_rng(1)
    pts = rng.integers(0, 16, size=(300, 3))
    for order in AXIS_ORDERS:
        cols = ["XYZ".index(c) for c in order]
        key = axis_order_key(pts, order, 4)
        brute = sorted(range(300), key=lambda i: (tuple(pts[i, cols]), i))
        assert np.array_equal(np.lexsort((np.arange(300), key)), brute)


def test_axis_key_pure_x_sort():
    pts = np.c_[np.random.default_rng(2).permutation(16), np.zeros(16, int), np.arange(16)]
    assert np.array_equal(np.argsort(axis_order_key(pts, "XYZ", 4)), np.argsort(pts[:, 0]))


def test_axis_key_symmetry_under_transposition():
    cloud = np.random.default_rng(3).normal(size=(100, 3))
    a = np.argsort(curve_keys(cloud, "XYZ", 10), kind="stable")
    b = np.argsort(curve_keys(cloud[:, ::-1], "ZYX", 10), kind="stable")
    assert np.array_equal(a, b)


def test_curve_keys_dispatch():
    cloud = np.random.default_rng(4).normal(size=(20, 3))
    assert np.array_equal(curve_keys(cloud, "Hilbert", 5), hilbert_index(quantize(cloud, 5), 5))
    with pytest.raises(ValueError):
        curve_keys(cloud, "XXY", 5)
