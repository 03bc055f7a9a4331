"""Adam optimiser and finite-difference gradient verification."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .autodiff import Graph, Node
from .errors import NumericError, StructuralError


@dataclass
class AdamState:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)


def adam_step(params: dict[str, np.ndarray], grads: dict[str, np.ndarray],
              state: AdamState) -> tuple[dict[str, np.ndarray], AdamState]:
    """One bias-corrected Adam update, applied in place.

    All gradients are validated before any parameter moves, so a non-finite
    gradient leaves both ``params`` and ``state`` untouched.
    """
    for name, g in grads.items():
        if name not in params:
            raise StructuralError(f"gradient for unknown parameter {name!r}")
        if g.shape != params[name].shape:
            raise StructuralError(f"{name}: gradient shape {g.shape} != parameter shape {params[name].shape}")
        if not np.isfinite(g).all():
            raise NumericError(f"non-finite gradient for {name!r}; update skipped")
    state.step += 1
    t = state.step
    c1 = 1.0 - state.beta1 ** t
    c2 = 1.0 - state.beta2 ** t
    for name, g in grads.items():
        m = state.m.setdefault(name, np.zeros_like(params[name]))
        v = state.v.setdefault(name, np.zeros_like(params[name]))
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * g * g
        params[name] -= state.lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
    return params, state


LossFn = Callable[[Graph, dict[str, Node]], Node]


def _loss_value(loss_fn: LossFn, params: dict[str, np.ndarray]) -> float:
    g = Graph(check_finite=False)
    nodes = {k: g.param(v, name=k) for k, v in params.items()}
    value = float(loss_fn(g, nodes).value)
    if not np.isfinite(value):
        raise NumericError("loss became non-finite under finite-difference perturbation")
    return value


def analytic_gradients(loss_fn: LossFn, params: dict[str, np.ndarray]) -> tuple[float, dict[str, np.ndarray]]:
    g = Graph()
    nodes = {k: g.param(v, name=k) for k, v in params.items()}
    loss = loss_fn(g, nodes)
    grads = g.backward(loss)
    return float(loss.value), {k: grads[n] for k, n in nodes.items()}


def finite_difference_check(loss_fn: LossFn, params: dict[str, np.ndarray],
                            step: float = 1e-5) -> float:
    """Max relative error between reverse-mode and central-difference gradients.

    ``loss_fn(graph, param_nodes)`` must rebuild the scalar loss from scratch
    and be deterministic (reseed any dropout stream inside it). Each entry is
    perturbed by ``step * (1 + |theta|)``; the error of one entry is
    ``|g_ad - g_fd| / max(1e-8, |g_ad| + |g_fd|)``.
    """
    if step <= 0:
        raise ValueError("step must be positive")
    _, ad = analytic_gradients(loss_fn, params)
    work = {k: np.array(v, dtype=np.float64, copy=True) for k, v in params.items()}
    worst = 0.0
    for name, arr in work.items():
        flat = arr.reshape(-1)
        gflat = ad[name].reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            h = step * (1.0 + abs(orig))
            flat[i] = orig + h
            up = _loss_value(loss_fn, work)
            flat[i] = orig - h
            down = _loss_value(loss_fn, work)
            flat[i] = orig
            fd = (up - down) / (2.0 * h)
            err = abs(gflat[i] - fd) / max(1e-8, abs(gflat[i]) + abs(fd))
            worst = max(worst, err)
    return worst
