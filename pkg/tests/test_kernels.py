import numpy as np
import pytest

from tabflow import _kernels as K
from tabflow import spline


def random_knots(rows, n_bins, seed=0, bound=3.0):
    raw = np.random.default_rng(seed).normal(scale=2.0, size=(rows, spline.raw_size(n_bins)))
    return spline.constrain(raw, n_bins, bound).arrays()


def test_search_bins_paths_agree_and_match_searchsorted():
    kx, _, _ = random_knots(50, 7)
    v = np.random.default_rng(1).uniform(-3, 3, size=(50, 40))
    v[:, 0] = kx[:, 3]
    a, b = K.search_bins_numba(kx, v), K.search_bins_numpy(kx, v)
    np.testing.assert_array_equal(a, b)
    ref = np.array([[np.searchsorted(kx[r], x, side="right") - 1 for x in v[r]] for r in range(50)])
    np.testing.assert_array_equal(a, np.clip(ref, 0, 6))
    assert np.all(a[:, 0] == 3)


@pytest.mark.parametrize("n_bins", [1, 5, 16])
def test_forward_inverse_paths_agree(n_bins):
    kx, ky, d = random_knots(30, n_bins, seed=n_bins)
    z = np.random.default_rng(2).uniform(-4, 4, size=(30, 25))
    y1, l1 = K.rqs_forward_numba(z, kx, ky, d, 3.0)
    y2, l2 = K.rqs_forward_numpy(z, kx, ky, d, 3.0)
    np.testing.assert_allclose(y1, y2, atol=1e-13)
    np.testing.assert_allclose(l1, l2, atol=1e-12)
    z1, m1, w1 = K.rqs_inverse_numba(y1, kx, ky, d, 3.0)
    z2, m2, w2 = K.rqs_inverse_numpy(y1, kx, ky, d, 3.0)
    np.testing.assert_allclose(z1, z2, atol=1e-12)
    np.testing.assert_allclose(m1, m2, atol=1e-11)
    assert w1 >= -1e-12 and w2 >= -1e-12


def test_crps_paths_agree_with_naive_double_sum():
    s = np.random.default_rng(3).normal(size=(4, 30))
    y = np.array([0.0, 1.0, -2.0, 0.5])
    naive = np.abs(s - y[:, None]).mean(1) - np.abs(s[:, :, None] - s[:, None, :]).sum((1, 2)) / (2 * 30 ** 2)
    np.testing.assert_allclose(K.crps_energy_numba(s, y), naive, rtol=1e-13)
    np.testing.assert_allclose(K.crps_energy_numpy(s, y), naive, rtol=1e-13)


def test_backend_flag_is_reported():
    assert K.BACKEND in ("numba", "numpy")
    assert (K.rqs_forward is K.rqs_forward_numba) == K.USE_NUMBA
