"""Point, probabilistic and selective-prediction metrics."""
from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass
from fractions import Fraction

import numpy as np

from . import _kernels
from .errors import StructuralError
from .rng import Rng

DECILES = tuple(range(10, 101, 10))
CONFIDENCE_METHODS = ("inv_std", "neg_entropy")
METRIC_KEYS = ("nll", "rmse", "mape", "crps", "aurc", "confidence_method", "seed", "n_samples")
MAPE_EPS = 1e-9


def _vector(a, name: str) -> np.ndarray:
    a = np.asarray(a, dtype=np.float64).reshape(-1)
    if a.size == 0:
        raise StructuralError(f"{name}: empty input")
    return a


def _pair(pred, y) -> tuple[np.ndarray, np.ndarray]:
    pred, y = _vector(pred, "predictions"), _vector(y, "targets")
    if pred.shape != y.shape:
        raise StructuralError(f"{len(pred)} predictions for {len(y)} targets")
    return pred, y


def nll_metric(log_densities) -> float:
    return float(-_vector(log_densities, "log densities").mean())


def rmse(pred, y) -> float:
    pred, y = _pair(pred, y)
    return float(np.sqrt(np.mean((pred - y) ** 2)))


def mape(pred, y) -> float:
    """Mean absolute percentage error, in percent."""
    pred, y = _pair(pred, y)
    if (np.abs(y) <= MAPE_EPS).any():
        raise StructuralError(f"MAPE undefined: {(np.abs(y) <= MAPE_EPS).sum()} targets with |y| <= {MAPE_EPS}")
    return float(100.0 * np.mean(np.abs(pred - y) / np.abs(y)))


def crps_rows(samples, y) -> np.ndarray:
    """Energy-form CRPS estimate for each row of ``samples`` ``(R, S)``."""
    samples = np.ascontiguousarray(samples, dtype=np.float64)
    y = np.ascontiguousarray(y, dtype=np.float64).reshape(-1)
    if samples.ndim != 2 or samples.shape[0] != y.shape[0]:
        raise StructuralError(f"samples {samples.shape} do not match {y.shape[0]} targets")
    if samples.shape[1] < 2:
        raise StructuralError("CRPS needs at least 2 samples")
    return _kernels.crps_energy(samples, y)


def crps_sample(samples, y: float) -> float:
    """CRPS of one target against a 1-D sample set."""
    return float(crps_rows(np.asarray(samples, dtype=np.float64).reshape(1, -1), np.array([float(y)]))[0])


def confidence_scores(dist, method: str = "inv_std", n: int = 1000, rng: Rng | None = None) -> np.ndarray:
    """Higher means more confident; ``dist`` is a PredictiveDistribution."""
    if n < 2:
        raise StructuralError("confidence scores need at least 2 samples")
    rng = rng or Rng(0)
    if method == "inv_std":
        return 1.0 / dist.std(n, rng)
    if method == "neg_entropy":
        return -dist.entropy(n, rng)
    raise StructuralError(f"unknown confidence method {method!r} (expected one of {CONFIDENCE_METHODS})")


@dataclass(frozen=True)
class RiskCoverageCurve:
    coverage: tuple[int, ...]
    risk: tuple[float, ...]
    risk_name: str = "error"
    aurc: float | None = None

    def __post_init__(self):
        if len(self.coverage) != len(self.risk):
            raise StructuralError("coverage and risk lengths differ")
        if any(b <= a for a, b in zip(self.coverage, self.coverage[1:])):
            raise StructuralError("coverage levels must be strictly ascending")
        if self.coverage and self.coverage[-1] != 100:
            raise StructuralError("the last coverage level must be 100")

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["coverage", "risk"])
            for u, v in zip(self.coverage, self.risk):
                w.writerow([u, repr(v)])


def risk_coverage(confidences, errors, levels=DECILES, risk_name: str = "error") -> RiskCoverageCurve:
    """Mean error among the ``ceil(c N / 100)`` most confident rows, per level ``c``."""
    conf, err = _vector(confidences, "confidences"), _vector(errors, "errors")
    if conf.shape != err.shape:
        raise StructuralError("confidences and errors differ in length")
    levels = tuple(int(c) for c in levels)
    n = len(err)
    if n < len(levels):
        raise StructuralError(f"{n} rows cannot fill {len(levels)} coverage levels")
    if any(not 0 < c <= 100 for c in levels):
        raise StructuralError("coverage levels must lie in (0, 100]")
    if not np.isfinite(conf).all():
        raise StructuralError("non-finite confidence score")
    order = np.argsort(-conf, kind="stable")
    ranked = err[order]
    # Deviations from the first error keep constant risk exact.
    ref = ranked[0]
    prefix = np.cumsum(ranked - ref)
    risks = []
    for c in levels:
        k = -(-c * n // 100)
        risks.append(float(ref + prefix[k - 1] / k))
    return RiskCoverageCurve(levels, tuple(risks), risk_name)


def aurc(curve: RiskCoverageCurve) -> float:
    """Trapezoid area over the decile grid, divided by 100; ignores [0, 10)."""
    if tuple(curve.coverage) != DECILES:
        raise StructuralError(f"AURC needs coverage levels exactly {DECILES}, got {curve.coverage}")
    v = [Fraction(x) for x in curve.risk]
    u = curve.coverage
    total = sum((v[i] + v[i - 1]) / 2 * (u[i] - u[i - 1]) for i in range(1, len(u)))
    return float(total / 100)


def with_aurc(curve: RiskCoverageCurve) -> RiskCoverageCurve:
    return RiskCoverageCurve(curve.coverage, curve.risk, curve.risk_name, aurc(curve))


def metrics_document(nll=None, rmse=None, mape=None, crps=None, aurc=None, confidence_method=None,
                     seed=None, n_samples=None, **extra) -> dict:
    """The metrics JSON document; absent metrics are ``null``."""
    doc = {"nll": nll, "rmse": rmse, "mape": mape, "crps": crps, "aurc": aurc,
           "confidence_method": confidence_method, "seed": seed, "n_samples": n_samples}
    doc.update(extra)
    for k, v in doc.items():
        if isinstance(v, float) and not math.isfinite(v):
            raise StructuralError(f"metric {k} is not finite")
    return doc


def write_metrics(doc: dict, path) -> None:
    missing = [k for k in METRIC_KEYS if k not in doc]
    if missing:
        raise StructuralError(f"metrics document lacks {missing}")
    with open(path, "w") as fh:
        json.dump(doc, fh, indent=2, sort_keys=True)
        fh.write("\n")
