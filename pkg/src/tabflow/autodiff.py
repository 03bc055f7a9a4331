"""Eager reverse-mode automatic differentiation on float64 numpy arrays.

A :class:`Graph` is a tape: every operation computes its value immediately
and appends a node, so creation order is a valid topological order.
:meth:`Graph.backward` walks the tape in reverse and returns the gradient of a
scalar output with respect to every parameter leaf.

    g = Graph()
    w = g.param(np.ones((3, 1)))
    x = g.constant(np.arange(6.0).reshape(2, 3))
    loss = g.mean(g.relu(x @ w))
    grads = g.backward(loss)      # {w: array of shape (3, 1)}
"""
from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from .errors import NumericError, StructuralError
from .rng import Rng

Vjp = Callable[[np.ndarray], Sequence[np.ndarray | None]]


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum ``grad`` down to ``shape`` after numpy broadcasting."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


class Node:
    """One recorded value on a :class:`Graph`."""

    __slots__ = ("graph", "index", "op", "inputs", "value", "vjp", "requires_grad", "name")

    def __init__(self, graph, index, op, inputs, value, vjp, requires_grad, name=None):
        self.graph = graph
        self.index = index
        self.op = op
        self.inputs = inputs
        self.value = value
        self.vjp = vjp
        self.requires_grad = requires_grad
        self.name = name

    def __repr__(self) -> str:
        label = f" {self.name!r}" if self.name else ""
        return f"Node#{self.index}<{self.op}{label} shape={self.value.shape}>"

    @property
    def shape(self) -> tuple[int, ...]:
        return self.value.shape

    @property
    def ndim(self) -> int:
        return self.value.ndim

    def __add__(self, other):
        return self.graph.add(self, other)

    def __radd__(self, other):
        return self.graph.add(other, self)

    def __sub__(self, other):
        return self.graph.sub(self, other)

    def __rsub__(self, other):
        return self.graph.sub(other, self)

    def __mul__(self, other):
        return self.graph.mul(self, other)

    def __rmul__(self, other):
        return self.graph.mul(other, self)

    def __truediv__(self, other):
        return self.graph.div(self, other)

    def __rtruediv__(self, other):
        return self.graph.div(other, self)

    def __neg__(self):
        return self.graph.neg(self)

    def __matmul__(self, other):
        return self.graph.matmul(self, other)

    def __getitem__(self, key):
        return self.graph.getitem(self, key)


class Graph:
    """Tape of operations; see the module docstring."""

    def __init__(self, check_finite: bool = True):
        self.nodes: list[Node] = []
        self.check_finite = check_finite

    def __len__(self) -> int:
        return len(self.nodes)

    @property
    def order(self) -> list[int]:
        return [n.index for n in self.nodes]

    # -- node creation ---------------------------------------------------

    def _record(self, op: str, inputs: tuple[Node, ...], value, vjp: Vjp | None,
                name: str | None = None) -> Node:
        value = np.asarray(value, dtype=np.float64)
        index = len(self.nodes)
        if self.check_finite and not np.isfinite(value).all():
            raise NumericError(f"non-finite output at node #{index} ({op}{' ' + name if name else ''})")
        requires_grad = any(i.requires_grad for i in inputs)
        node = Node(self, index, op, inputs, value, vjp if requires_grad else None,
                    requires_grad, name)
        self.nodes.append(node)
        return node

    def constant(self, value, name: str | None = None) -> Node:
        return self._record("const", (), value, None, name)

    def param(self, value, name: str | None = None) -> Node:
        node = self._record("param", (), value, None, name)
        node.requires_grad = True
        return node

    def lift(self, x) -> Node:
        if isinstance(x, Node):
            if x.graph is not self:
                raise StructuralError(f"{x!r} belongs to another graph")
            return x
        return self.constant(x)

    # -- element-wise arithmetic -------------------------------------------

    def _binary(self, op, a, b, fn):
        a, b = self.lift(a), self.lift(b)
        try:
            value = fn(a.value, b.value)
        except ValueError as err:
            raise StructuralError(f"{op}: shapes {a.shape} and {b.shape} do not broadcast") from err
        return a, b, value

    def add(self, a, b) -> Node:
        a, b, value = self._binary("add", a, b, np.add)
        return self._record("add", (a, b), value,
                            lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))

    def sub(self, a, b) -> Node:
        a, b, value = self._binary("sub", a, b, np.subtract)
        return self._record("sub", (a, b), value,
                            lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)))

    def mul(self, a, b) -> Node:
        a, b, value = self._binary("mul", a, b, np.multiply)
        return self._record("mul", (a, b), value,
                            lambda g: (_unbroadcast(g * b.value, a.shape),
                                       _unbroadcast(g * a.value, b.shape)))

    def div(self, a, b) -> Node:
        a, b, value = self._binary("div", a, b, np.divide)
        return self._record("div", (a, b), value,
                            lambda g: (_unbroadcast(g / b.value, a.shape),
                                       _unbroadcast(-g * value / b.value, b.shape)))

    def maximum(self, a, b) -> Node:
        a, b, value = self._binary("maximum", a, b, np.maximum)
        take_a = a.value >= b.value
        return self._record("maximum", (a, b), value,
                            lambda g: (_unbroadcast(g * take_a, a.shape),
                                       _unbroadcast(g * ~take_a, b.shape)))

    def neg(self, x) -> Node:
        x = self.lift(x)
        return self._record("neg", (x,), -x.value, lambda g: (-g,))

    def square(self, x) -> Node:
        x = self.lift(x)
        return self._record("square", (x,), x.value * x.value, lambda g: (2.0 * g * x.value,))

    def exp(self, x) -> Node:
        x = self.lift(x)
        with np.errstate(over="ignore"):
            value = np.exp(x.value)
        return self._record("exp", (x,), value, lambda g: (g * value,))

    def log(self, x) -> Node:
        x = self.lift(x)
        with np.errstate(divide="ignore", invalid="ignore"):
            value = np.log(x.value)
        return self._record("log", (x,), value, lambda g: (g / x.value,))

    def sqrt(self, x) -> Node:
        x = self.lift(x)
        with np.errstate(invalid="ignore"):
            value = np.sqrt(x.value)
        return self._record("sqrt", (x,), value, lambda g: (0.5 * g / value,))

    def relu(self, x) -> Node:
        x = self.lift(x)
        active = x.value > 0
        return self._record("relu", (x,), np.where(active, x.value, 0.0), lambda g: (g * active,))

    def softplus(self, x) -> Node:
        x = self.lift(x)
        value = np.logaddexp(0.0, x.value)
        # d/dx log(1 + e^x) = sigmoid(x), written to stay finite for large |x|.
        sig = np.exp(x.value - value)
        return self._record("softplus", (x,), value, lambda g: (g * sig,))

    def clip(self, x, lo: float, hi: float) -> Node:
        x = self.lift(x)
        inside = (x.value >= lo) & (x.value <= hi)
        return self._record("clip", (x,), np.clip(x.value, lo, hi), lambda g: (g * inside,))

    def where(self, mask, a, b) -> Node:
        """Select ``a`` where the constant boolean ``mask`` holds, else ``b``."""
        mask = np.asarray(mask, dtype=bool)
        a, b = self.lift(a), self.lift(b)
        value = np.where(mask, a.value, b.value)
        return self._record("where", (a, b), value,
                            lambda g: (_unbroadcast(np.where(mask, g, 0.0), a.shape),
                                       _unbroadcast(np.where(mask, 0.0, g), b.shape)))

    # -- linear algebra -----------------------------------------------------

    def matmul(self, a, b) -> Node:
        a, b = self.lift(a), self.lift(b)
        if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
            raise StructuralError(f"matmul: cannot multiply {a.shape} by {b.shape}")
        value = a.value @ b.value
        return self._record("matmul", (a, b), value,
                            lambda g: (g @ b.value.T, a.value.T @ g))

    def einsum(self, spec: str, a, b) -> Node:
        """Two-operand einsum; every input index must survive in the output or the other operand."""
        a, b = self.lift(a), self.lift(b)
        ins, out = spec.replace(" ", "").split("->")
        sa, sb = ins.split(",")
        for mine, other in ((sa, sb), (sb, sa)):
            if set(mine) - set(out) - set(other):
                raise StructuralError(f"einsum {spec!r}: index summed within one operand")
        try:
            value = np.einsum(spec, a.value, b.value)
        except ValueError as err:
            raise StructuralError(f"einsum {spec!r}: {a.shape} and {b.shape}") from err
        return self._record("einsum", (a, b), value,
                            lambda g: (np.einsum(f"{out},{sb}->{sa}", g, b.value),
                                       np.einsum(f"{out},{sa}->{sb}", g, a.value)))

    # -- reductions ---------------------------------------------------------

    def sum(self, x, axis=None, keepdims: bool = False) -> Node:
        x = self.lift(x)
        value = x.value.sum(axis=axis, keepdims=keepdims)

        def vjp(g):
            if axis is not None and not keepdims:
                g = np.expand_dims(g, axis)
            return (np.broadcast_to(g, x.shape).copy(),)

        return self._record("sum", (x,), value, vjp)

    def mean(self, x, axis=None, keepdims: bool = False) -> Node:
        x = self.lift(x)
        count = x.value.size if axis is None else np.prod([x.shape[a] for a in np.atleast_1d(axis)])
        if count == 0:
            raise StructuralError("mean over an empty axis")
        return self.mul(self.sum(x, axis=axis, keepdims=keepdims), 1.0 / count)

    def softmax(self, x, axis: int = -1) -> Node:
        x = self.lift(x)
        shifted = x.value - x.value.max(axis=axis, keepdims=True)
        e = np.exp(shifted)
        value = e / e.sum(axis=axis, keepdims=True)
        return self._record("softmax", (x,), value,
                            lambda g: (value * (g - (g * value).sum(axis=axis, keepdims=True)),))

    def cumsum(self, x, axis: int = -1) -> Node:
        x = self.lift(x)
        value = np.cumsum(x.value, axis=axis)
        return self._record("cumsum", (x,), value,
                            lambda g: (np.flip(np.cumsum(np.flip(g, axis), axis=axis), axis),))

    # -- shape manipulation -------------------------------------------------

    def reshape(self, x, shape) -> Node:
        x = self.lift(x)
        try:
            value = x.value.reshape(shape)
        except ValueError as err:
            raise StructuralError(f"reshape: {x.shape} -> {shape}") from err
        return self._record("reshape", (x,), value, lambda g: (g.reshape(x.shape),))

    def concat(self, xs: Sequence, axis: int = -1) -> Node:
        xs = tuple(self.lift(x) for x in xs)
        if not xs:
            raise StructuralError("concat of nothing")
        try:
            value = np.concatenate([x.value for x in xs], axis=axis)
        except ValueError as err:
            raise StructuralError(f"concat: shapes {[x.shape for x in xs]}") from err
        bounds = np.cumsum([x.shape[axis] for x in xs])[:-1]
        return self._record("concat", xs, value, lambda g: tuple(np.split(g, bounds, axis=axis)))

    def getitem(self, x, key) -> Node:
        x = self.lift(x)
        try:
            value = x.value[key]
        except IndexError as err:
            raise StructuralError(f"slice {key!r} out of range for {x.shape}") from err

        def vjp(g):
            out = np.zeros_like(x.value)
            np.add.at(out, key, g)
            return (out,)

        return self._record("slice", (x,), value, vjp)

    def take(self, x, indices, axis: int = 0) -> Node:
        """Row lookup along ``axis`` (embedding tables, feature reordering)."""
        x = self.lift(x)
        indices = np.asarray(indices, dtype=np.intp)
        n = x.shape[axis]
        if indices.size and (indices.min() < 0 or indices.max() >= n):
            raise StructuralError(f"take: index out of range [0, {n}) on axis {axis}")
        value = np.take(x.value, indices, axis=axis)

        def vjp(g):
            out = np.zeros_like(x.value)
            moved = np.moveaxis(out, axis, 0)
            gm = np.moveaxis(g, list(range(axis, axis + indices.ndim)), list(range(indices.ndim)))
            np.add.at(moved, indices, gm)
            return (out,)

        return self._record("take", (x,), value, vjp)

    def gather(self, x, indices) -> Node:
        """``out[r, j] = x[r, indices[r, j]]`` for a 2-D ``x``."""
        x = self.lift(x)
        indices = np.asarray(indices, dtype=np.intp)
        if x.ndim != 2 or indices.ndim != 2 or indices.shape[0] != x.shape[0]:
            raise StructuralError(f"gather: x {x.shape} with indices {indices.shape}")
        value = np.take_along_axis(x.value, indices, axis=1)
        rows = np.broadcast_to(np.arange(x.shape[0])[:, None], indices.shape)

        def vjp(g):
            out = np.zeros_like(x.value)
            np.add.at(out, (rows, indices), g)
            return (out,)

        return self._record("gather", (x,), value, vjp)

    # -- layers ---------------------------------------------------------------

    def batch_norm(self, x, gamma, beta, running: dict, train: bool,
                   momentum: float = 0.1, eps: float = 1e-5) -> Node:
        """Batch normalisation over axis 0.

        ``running`` holds ``mean`` and ``var`` arrays; train mode updates them
        in place (unbiased variance, as is conventional), eval mode only reads.
        """
        x, gamma, beta = self.lift(x), self.lift(gamma), self.lift(beta)
        if x.ndim != 2:
            raise StructuralError(f"batch_norm expects (batch, features), got {x.shape}")
        n = x.shape[0]
        if train:
            if n < 2:
                raise StructuralError("batch_norm in train mode needs a batch of at least 2 rows")
            mu = x.value.mean(axis=0)
            var = x.value.var(axis=0)
            running["mean"] *= 1.0 - momentum
            running["mean"] += momentum * mu
            running["var"] *= 1.0 - momentum
            running["var"] += momentum * var * n / (n - 1)
        else:
            mu, var = running["mean"], running["var"]
        inv_std = 1.0 / np.sqrt(var + eps)
        xhat = (x.value - mu) * inv_std
        value = gamma.value * xhat + beta.value

        def vjp(g):
            dgamma = (g * xhat).sum(axis=0)
            dbeta = g.sum(axis=0)
            dxhat = g * gamma.value
            if train:
                dx = inv_std * (dxhat - dxhat.mean(axis=0) - xhat * (dxhat * xhat).mean(axis=0))
            else:
                dx = dxhat * inv_std
            return dx, dgamma.reshape(gamma.shape), dbeta.reshape(beta.shape)

        return self._record("batch_norm", (x, gamma, beta), value, vjp)

    def dropout(self, x, p: float, rng: Rng | None, train: bool) -> Node:
        """Inverted dropout; the identity in eval mode or when ``p == 0``."""
        x = self.lift(x)
        if not train or p == 0.0:
            return x
        if not 0.0 <= p < 1.0:
            raise StructuralError(f"dropout probability {p} outside [0, 1)")
        if rng is None:
            raise StructuralError("train-mode dropout needs an rng stream")
        mask = (rng.uniform(x.shape) >= p) / (1.0 - p)
        return self._record("dropout", (x,), x.value * mask, lambda g: (g * mask,))

    # -- reverse pass -------------------------------------------------------

    def backward(self, output: Node) -> dict[Node, np.ndarray]:
        """Gradients of scalar ``output`` for every parameter leaf on the tape."""
        if output.graph is not self:
            raise StructuralError("output node belongs to another graph")
        if output.value.size != 1:
            raise StructuralError(f"backward needs a scalar output, got shape {output.shape}")
        grads: dict[int, np.ndarray] = {output.index: np.ones_like(output.value)}
        result: dict[Node, np.ndarray] = {}
        for node in reversed(self.nodes[: output.index + 1]):
            g = grads.pop(node.index, None)
            if node.op == "param":
                result[node] = g if g is not None else np.zeros_like(node.value)
                continue
            if g is None or node.vjp is None:
                continue
            for inp, gi in zip(node.inputs, node.vjp(g)):
                if gi is None or not inp.requires_grad:
                    continue
                if inp.index in grads:
                    grads[inp.index] = grads[inp.index] + gi
                else:
                    grads[inp.index] = gi
        for node in self.nodes[output.index + 1:]:
            if node.op == "param":
                result[node] = np.zeros_like(node.value)
        return result


def forward(build: Callable[..., Node | Sequence[Node]], bindings: dict[str, np.ndarray],
            params: dict[str, np.ndarray] | None = None, check_finite: bool = True):
    """Run ``build(graph, inputs, params)`` on a fresh graph.

    ``bindings`` become constant nodes and ``params`` become parameter nodes,
    both passed to ``build`` as dicts keyed like the input dicts. Returns
    ``(graph, outputs, param_nodes)``.
    """
    g = Graph(check_finite=check_finite)
    inputs = {k: g.constant(v, name=k) for k, v in bindings.items()}
    pnodes = {k: g.param(v, name=k) for k, v in (params or {}).items()}
    return g, build(g, inputs, pnodes), pnodes


def backward(graph: Graph, output: Node) -> dict[Node, np.ndarray]:
    return graph.backward(output)
