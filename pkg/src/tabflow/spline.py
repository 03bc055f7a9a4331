"""Monotonic rational-quadratic spline transforms with identity linear tails.

Inside ``[-B, B]`` the map is piecewise rational-quadratic on ``M`` bins;
outside it is the identity. Boundary derivatives are pinned to 1 so value and
slope are continuous at ``+-B``.

Two evaluation paths share one set of formulas:

* array functions (:func:`spline_forward`, :func:`spline_inverse`, stacks)
  run the compiled kernels in :mod:`tabflow._kernels` and are used for
  inference and sampling;
* ``*_graph`` functions record the same computation on an autodiff
  :class:`~tabflow.autodiff.Graph` so training gets exact gradients with
  respect to the raw spline logits.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import _kernels
from .autodiff import Graph, Node
from .errors import ConfigurationError, NumericError, StructuralError

MIN_BIN_WIDTH = 1e-3
MIN_BIN_HEIGHT = 1e-3
MIN_DERIVATIVE = 1e-3


def raw_size(n_bins: int) -> int:
    """Unconstrained parameters per flow layer: widths, heights, interior slopes."""
    return 3 * n_bins - 1


def _derivative_shift(min_derivative: float) -> float:
    # softplus(0 + shift) + min_derivative == 1, so zero logits give slope 1.
    return math.log(math.expm1(1.0 - min_derivative))


@dataclass(frozen=True)
class SplineParams:
    """Knots and knot derivatives of one spline (1-D arrays) or a batch (2-D, one row each)."""

    knot_x: np.ndarray
    knot_y: np.ndarray
    derivatives: np.ndarray
    tail_bound: float

    @property
    def n_bins(self) -> int:
        return self.knot_x.shape[-1] - 1

    @property
    def batched(self) -> bool:
        return self.knot_x.ndim == 2

    def __len__(self) -> int:
        return self.knot_x.shape[0] if self.batched else 1

    def row(self, i: int) -> "SplineParams":
        if not self.batched:
            raise IndexError("unbatched spline has no rows")
        return SplineParams(self.knot_x[i], self.knot_y[i], self.derivatives[i], self.tail_bound)

    def arrays(self) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        return (np.atleast_2d(self.knot_x), np.atleast_2d(self.knot_y),
                np.atleast_2d(self.derivatives))

    def repeat(self, n: int) -> "SplineParams":
        """Same parameters broadcast to ``n`` rows."""
        kx, ky, d = self.arrays()
        if kx.shape[0] != 1:
            raise StructuralError("only a single spline can be repeated")
        tile = lambda a: np.repeat(a, n, axis=0)  # noqa: E731
        return SplineParams(tile(kx), tile(ky), tile(d), self.tail_bound)


# --------------------------------------------------------------------------
# constraining raw logits
# --------------------------------------------------------------------------

def _check_config(n_bins: int, tail_bound: float, min_bin_width: float, min_bin_height: float):
    if n_bins < 1:
        raise ConfigurationError(f"need at least one bin, got {n_bins}")
    if not tail_bound > 0:
        raise ConfigurationError(f"tail bound must be positive, got {tail_bound}")
    if n_bins * min_bin_width >= 1 or n_bins * min_bin_height >= 1:
        raise ConfigurationError(f"{n_bins} bins cannot each take a minimum share of "
                                 f"{max(min_bin_width, min_bin_height)}")


def _knots_graph(g: Graph, logits: Node, n_bins: int, bound: float, min_size: float) -> Node:
    rows = logits.shape[0]
    share = min_size + (1.0 - n_bins * min_size) * g.softmax(logits, axis=-1)
    cum = g.cumsum(share, axis=-1)
    inner = -bound + (2.0 * bound) * cum[:, : n_bins - 1]
    lo = g.constant(np.full((rows, 1), -bound))
    hi = g.constant(np.full((rows, 1), bound))
    return g.concat([lo, inner, hi], axis=1)


def constrain_graph(g: Graph, raw: Node, n_bins: int, tail_bound: float,
                    min_bin_width: float = MIN_BIN_WIDTH, min_bin_height: float = MIN_BIN_HEIGHT,
                    min_derivative: float = MIN_DERIVATIVE) -> tuple[Node, Node, Node]:
    """Map ``(R, 3M - 1)`` raw logits to knot_x, knot_y and derivative nodes, each ``(R, M + 1)``."""
    _check_config(n_bins, tail_bound, min_bin_width, min_bin_height)
    if raw.ndim != 2 or raw.shape[1] != raw_size(n_bins):
        raise StructuralError(f"raw spline parameters must be (R, {raw_size(n_bins)}), got {raw.shape}")
    M = n_bins
    kx = _knots_graph(g, raw[:, :M], M, tail_bound, min_bin_width)
    ky = _knots_graph(g, raw[:, M:2 * M], M, tail_bound, min_bin_height)
    inner = min_derivative + g.softplus(raw[:, 2 * M:] + _derivative_shift(min_derivative))
    ones = g.constant(np.ones((raw.shape[0], 1)))
    d = g.concat([ones, inner, ones], axis=1)
    return kx, ky, d


def constrain(raw, n_bins: int, tail_bound: float, min_bin_width: float = MIN_BIN_WIDTH,
              min_bin_height: float = MIN_BIN_HEIGHT,
              min_derivative: float = MIN_DERIVATIVE) -> SplineParams:
    """Constrain raw logits (1-D for one spline, 2-D for a batch) to a valid spline."""
    raw = np.asarray(raw, dtype=np.float64)
    if not np.isfinite(raw).all():
        raise NumericError("non-finite raw spline parameters")
    single = raw.ndim == 1
    g = Graph()
    kx, ky, d = constrain_graph(g, g.constant(np.atleast_2d(raw)), n_bins, tail_bound,
                                min_bin_width, min_bin_height, min_derivative)
    pick = (lambda n: n.value[0]) if single else (lambda n: n.value)
    return SplineParams(pick(kx), pick(ky), pick(d), float(tail_bound))


# --------------------------------------------------------------------------
# array evaluation (compiled kernels)
# --------------------------------------------------------------------------

def _as_rows(values, p: SplineParams):
    values = np.asarray(values, dtype=np.float64)
    if not np.isfinite(values).all():
        raise NumericError("non-finite spline input")
    rows = len(p) if p.batched else 1
    if p.batched:
        if values.ndim == 0 or values.shape[0] != rows:
            raise StructuralError(f"{rows} spline rows but input of shape {values.shape}")
        v2 = values.reshape(rows, -1)
    else:
        v2 = values.reshape(1, -1)
    return np.ascontiguousarray(v2), values.shape


def _check_output(values, lad):
    if not (np.isfinite(values).all() and np.isfinite(lad).all()):
        raise NumericError("spline produced non-finite values; knots or derivatives are invalid")


def spline_forward(z, p: SplineParams) -> tuple[np.ndarray, np.ndarray]:
    """``y = f(z)`` and ``log|f'(z)|``. Returns arrays shaped like ``z``."""
    z2, shape = _as_rows(z, p)
    kx, ky, d = p.arrays()
    y, lad = _kernels.rqs_forward(z2, kx, ky, d, p.tail_bound)
    _check_output(y, lad)
    return y.reshape(shape), lad.reshape(shape)


def spline_inverse(y, p: SplineParams) -> tuple[np.ndarray, np.ndarray]:
    """``z = f^-1(y)`` and ``log|d f^-1 / dy|``. Returns arrays shaped like ``y``."""
    y2, shape = _as_rows(y, p)
    kx, ky, d = p.arrays()
    z, lad, worst = _kernels.rqs_inverse(y2, kx, ky, d, p.tail_bound)
    if worst < -_kernels.DISC_TOL:
        raise NumericError(f"negative discriminant {worst:.3e} in spline inverse; knots are invalid")
    _check_output(z, lad)
    return z.reshape(shape), lad.reshape(shape)


def spline_derivative(z, p: SplineParams) -> np.ndarray:
    return np.exp(spline_forward(z, p)[1])


def stack_forward(value, layers: list[SplineParams]) -> tuple[np.ndarray, np.ndarray]:
    if not layers:
        raise StructuralError("a spline stack needs at least one layer")
    total = 0.0
    for p in layers:
        value, lad = spline_forward(value, p)
        total = total + lad
    return value, total


def stack_inverse(value, layers: list[SplineParams]) -> tuple[np.ndarray, np.ndarray]:
    if not layers:
        raise StructuralError("a spline stack needs at least one layer")
    total = 0.0
    for p in reversed(layers):
        value, lad = spline_inverse(value, p)
        total = total + lad
    return value, total


# --------------------------------------------------------------------------
# differentiable evaluation (autodiff graph)
# --------------------------------------------------------------------------

def _bin_nodes(g: Graph, kx: Node, ky: Node, d: Node, idx: np.ndarray):
    return (g.gather(kx, idx), g.gather(kx, idx + 1), g.gather(ky, idx), g.gather(ky, idx + 1),
            g.gather(d, idx), g.gather(d, idx + 1))


def _log_slope(g: Graph, t: Node, sl: Node, d0: Node, d1: Node) -> Node:
    tt = t * (1.0 - t)
    one_minus = 1.0 - t
    num = g.square(sl) * (d1 * g.square(t) + 2.0 * sl * tt + d0 * g.square(one_minus))
    den = sl + (d1 + d0 - 2.0 * sl) * tt
    return g.log(num) - 2.0 * g.log(den)


def spline_forward_graph(g: Graph, z: Node, kx: Node, ky: Node, d: Node,
                         bound: float) -> tuple[Node, Node]:
    """Differentiable forward map for an ``(R, 1)`` column ``z``."""
    inside = np.abs(z.value) <= bound
    zi = g.where(inside, z, 0.0)
    idx = _kernels.search_bins(np.ascontiguousarray(kx.value), np.ascontiguousarray(zi.value))
    x0, x1, y0, y1, d0, d1 = _bin_nodes(g, kx, ky, d, idx)
    w = x1 - x0
    h = y1 - y0
    sl = h / w
    t = (zi - x0) / w
    tt = t * (1.0 - t)
    den = sl + (d1 + d0 - 2.0 * sl) * tt
    y = y0 + h * (sl * g.square(t) + d0 * tt) / den
    lad = _log_slope(g, t, sl, d0, d1)
    return g.where(inside, y, z), g.where(inside, lad, 0.0)


def spline_inverse_graph(g: Graph, y: Node, kx: Node, ky: Node, d: Node,
                         bound: float) -> tuple[Node, Node]:
    """Differentiable inverse map for an ``(R, 1)`` column ``y``."""
    inside = np.abs(y.value) <= bound
    yi = g.where(inside, y, 0.0)
    idx = _kernels.search_bins(np.ascontiguousarray(ky.value), np.ascontiguousarray(yi.value))
    x0, x1, y0, y1, d0, d1 = _bin_nodes(g, kx, ky, d, idx)
    w = x1 - x0
    h = y1 - y0
    sl = h / w
    dy = yi - y0
    c2 = d1 + d0 - 2.0 * sl
    a = dy * c2 + h * (sl - d0)
    b = h * d0 - dy * c2
    c = -sl * dy
    disc = g.square(b) - 4.0 * a * c
    worst = disc.value[inside].min() if inside.any() else 0.0
    if worst < -_kernels.DISC_TOL:
        raise NumericError(f"negative discriminant {worst:.3e} in spline inverse; knots are invalid")
    root = 2.0 * c / (-b - g.sqrt(g.maximum(disc, 0.0)))
    t = g.clip(root, 0.0, 1.0)
    z = x0 + t * w
    lad = -_log_slope(g, t, sl, d0, d1)
    return g.where(inside, z, y), g.where(inside, lad, 0.0)


def stack_inverse_graph(g: Graph, y: Node, layers: list[tuple[Node, Node, Node]],
                        bound: float) -> tuple[Node, Node]:
    if not layers:
        raise StructuralError("a spline stack needs at least one layer")
    total = None
    for kx, ky, d in reversed(layers):
        y, lad = spline_inverse_graph(g, y, kx, ky, d, bound)
        total = lad if total is None else total + lad
    return y, total


def stack_forward_graph(g: Graph, z: Node, layers: list[tuple[Node, Node, Node]],
                        bound: float) -> tuple[Node, Node]:
    if not layers:
        raise StructuralError("a spline stack needs at least one layer")
    total = None
    for kx, ky, d in layers:
        z, lad = spline_forward_graph(g, z, kx, ky, d, bound)
        total = lad if total is None else total + lad
    return z, total
