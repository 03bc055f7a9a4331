"""Hot numeric kernels: rational-quadratic spline evaluation and the CRPS double sum.

Each kernel exists twice, a numba ``@njit`` loop and a vectorised numpy
version. The public names dispatch to numba unless ``TABFLOW_DISABLE_NUMBA``
is set to a truthy value (or numba is missing). Both paths take the same
arrays and return the same results to rounding.

Array conventions: spline inputs are ``(R, S)`` (S points per parameter row),
knot arrays are ``(R, M + 1)``.
"""
from __future__ import annotations

import os

import numpy as np

_FLAG = os.environ.get("TABFLOW_DISABLE_NUMBA", "").strip().lower()
NUMBA_REQUESTED = _FLAG not in ("1", "true", "yes", "on")

try:
    from numba import njit
    NUMBA_AVAILABLE = True
except ImportError:  # pragma: no cover - numba is a declared dependency
    NUMBA_AVAILABLE = False

    def njit(*args, **kwargs):
        def wrap(fn):
            return fn
        return wrap(args[0]) if args and callable(args[0]) else wrap

USE_NUMBA = NUMBA_REQUESTED and NUMBA_AVAILABLE

DISC_TOL = 1e-12


# --------------------------------------------------------------------------
# numba
# --------------------------------------------------------------------------

@njit(cache=True, error_model="numpy")
def _find_bin(knots, r, v, n_bins):
    lo = 0
    hi = n_bins - 1
    while lo < hi:
        mid = (lo + hi + 1) // 2
        if knots[r, mid] <= v:
            lo = mid
        else:
            hi = mid - 1
    return lo


@njit(cache=True, error_model="numpy")
def search_bins_numba(knots, values):
    R, S = values.shape
    n_bins = knots.shape[1] - 1
    out = np.empty((R, S), dtype=np.int64)
    for r in range(R):
        for s in range(S):
            out[r, s] = _find_bin(knots, r, values[r, s], n_bins)
    return out


@njit(cache=True, error_model="numpy")
def rqs_forward_numba(z, kx, ky, d, bound):
    R, S = z.shape
    n_bins = kx.shape[1] - 1
    y = np.empty((R, S))
    lad = np.empty((R, S))
    for r in range(R):
        for s in range(S):
            v = z[r, s]
            if v < -bound or v > bound:
                y[r, s] = v
                lad[r, s] = 0.0
                continue
            m = _find_bin(kx, r, v, n_bins)
            w = kx[r, m + 1] - kx[r, m]
            h = ky[r, m + 1] - ky[r, m]
            sl = h / w
            d0 = d[r, m]
            d1 = d[r, m + 1]
            t = (v - kx[r, m]) / w
            tt = t * (1.0 - t)
            den = sl + (d1 + d0 - 2.0 * sl) * tt
            y[r, s] = ky[r, m] + h * (sl * t * t + d0 * tt) / den
            num = sl * sl * (d1 * t * t + 2.0 * sl * tt + d0 * (1.0 - t) * (1.0 - t))
            lad[r, s] = np.log(num) - 2.0 * np.log(den)
    return y, lad


@njit(cache=True, error_model="numpy")
def rqs_inverse_numba(y, kx, ky, d, bound):
    R, S = y.shape
    n_bins = kx.shape[1] - 1
    z = np.empty((R, S))
    lad = np.empty((R, S))
    worst = 0.0
    for r in range(R):
        for s in range(S):
            v = y[r, s]
            if v < -bound or v > bound:
                z[r, s] = v
                lad[r, s] = 0.0
                continue
            m = _find_bin(ky, r, v, n_bins)
            w = kx[r, m + 1] - kx[r, m]
            h = ky[r, m + 1] - ky[r, m]
            sl = h / w
            d0 = d[r, m]
            d1 = d[r, m + 1]
            dy = v - ky[r, m]
            c2 = d1 + d0 - 2.0 * sl
            a = dy * c2 + h * (sl - d0)
            b = h * d0 - dy * c2
            c = -sl * dy
            disc = b * b - 4.0 * a * c
            if disc < worst:
                worst = disc
            if disc < 0.0:
                disc = 0.0
            t = 2.0 * c / (-b - np.sqrt(disc))
            if t < 0.0:
                t = 0.0
            elif t > 1.0:
                t = 1.0
            z[r, s] = kx[r, m] + t * w
            tt = t * (1.0 - t)
            den = sl + c2 * tt
            num = sl * sl * (d1 * t * t + 2.0 * sl * tt + d0 * (1.0 - t) * (1.0 - t))
            lad[r, s] = 2.0 * np.log(den) - np.log(num)
    return z, lad, worst


@njit(cache=True, error_model="numpy")
def crps_energy_numba(samples, y):
    R, S = samples.shape
    out = np.empty(R)
    for r in range(R):
        acc1 = 0.0
        for i in range(S):
            acc1 += abs(samples[r, i] - y[r])
        acc2 = 0.0
        for i in range(S):
            si = samples[r, i]
            for j in range(S):
                acc2 += abs(si - samples[r, j])
        out[r] = acc1 / S - acc2 / (2.0 * S * S)
    return out


# --------------------------------------------------------------------------
# numpy
# --------------------------------------------------------------------------

def search_bins_numpy(knots, values):
    interior = knots[:, 1:-1]
    return (interior[:, None, :] <= values[:, :, None]).sum(axis=-1).astype(np.int64)


def _bin_arrays(kx, ky, d, idx):
    take = lambda a, i: np.take_along_axis(a, i, axis=1)  # noqa: E731
    return take(kx, idx), take(kx, idx + 1), take(ky, idx), take(ky, idx + 1), take(d, idx), take(d, idx + 1)


def rqs_forward_numpy(z, kx, ky, d, bound):
    inside = (z >= -bound) & (z <= bound)
    zi = np.where(inside, z, 0.0)
    idx = search_bins_numpy(kx, zi)
    x0, x1, y0, y1, d0, d1 = _bin_arrays(kx, ky, d, idx)
    w = x1 - x0
    h = y1 - y0
    sl = h / w
    t = (zi - x0) / w
    tt = t * (1.0 - t)
    den = sl + (d1 + d0 - 2.0 * sl) * tt
    y = y0 + h * (sl * t * t + d0 * tt) / den
    num = sl * sl * (d1 * t * t + 2.0 * sl * tt + d0 * (1.0 - t) ** 2)
    lad = np.log(num) - 2.0 * np.log(den)
    return np.where(inside, y, z), np.where(inside, lad, 0.0)


def rqs_inverse_numpy(y, kx, ky, d, bound):
    inside = (y >= -bound) & (y <= bound)
    yi = np.where(inside, y, 0.0)
    idx = search_bins_numpy(ky, yi)
    x0, x1, y0, y1, d0, d1 = _bin_arrays(kx, ky, d, idx)
    w = x1 - x0
    h = y1 - y0
    sl = h / w
    dy = yi - y0
    c2 = d1 + d0 - 2.0 * sl
    a = dy * c2 + h * (sl - d0)
    b = h * d0 - dy * c2
    c = -sl * dy
    disc = b * b - 4.0 * a * c
    worst = float(min(0.0, disc[inside].min())) if inside.any() else 0.0
    t = np.clip(2.0 * c / (-b - np.sqrt(np.maximum(disc, 0.0))), 0.0, 1.0)
    z = x0 + t * w
    tt = t * (1.0 - t)
    den = sl + c2 * tt
    num = sl * sl * (d1 * t * t + 2.0 * sl * tt + d0 * (1.0 - t) ** 2)
    lad = 2.0 * np.log(den) - np.log(num)
    return np.where(inside, z, y), np.where(inside, lad, 0.0), worst


def crps_energy_numpy(samples, y):
    S = samples.shape[1]
    first = np.abs(samples - y[:, None]).mean(axis=1)
    # Row by row keeps the S x S pairwise matrix bounded in memory.
    second = np.array([np.abs(row[:, None] - row[None, :]).sum() for row in samples])
    return first - second / (2.0 * S * S)


# --------------------------------------------------------------------------
# dispatch
# --------------------------------------------------------------------------

if USE_NUMBA:
    search_bins = search_bins_numba
    rqs_forward = rqs_forward_numba
    rqs_inverse = rqs_inverse_numba
    crps_energy = crps_energy_numba
else:
    search_bins = search_bins_numpy
    rqs_forward = rqs_forward_numpy
    rqs_inverse = rqs_inverse_numpy
    crps_energy = crps_energy_numpy

BACKEND = "numba" if USE_NUMBA else "numpy"
