"""Tabular feature encoder: per-feature embeddings, flattening, residual MLP blocks.

Each numeric feature goes through its own ``1 -> D -> D`` MLP (or a single
``1 -> D`` projection when numeric embeddings are disabled); each categorical
feature looks up a row in its own table, whose last row is reserved for
unseen categories. The ``F`` embeddings are concatenated in schema order into
an ``F * D`` vector and passed through ``L`` residual blocks

    h <- h + Dropout(Linear(ReLU(Dropout(Linear(BatchNorm(h))))))
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .autodiff import Graph, Node
from .errors import NumericError, StructuralError
from .rng import Rng

NUMERIC = "numeric"
CATEGORICAL = "categorical"
UNKNOWN = "<unknown>"


@dataclass(frozen=True)
class Feature:
    name: str
    kind: str
    categories: tuple[str, ...] = ()

    @property
    def cardinality(self) -> int:
        return len(self.categories)

    @property
    def unknown_index(self) -> int:
        return len(self.categories)


@dataclass(frozen=True)
class FeatureSchema:
    """Ordered features; categorical ones carry their category-to-index order."""

    features: tuple[Feature, ...]

    def __post_init__(self):
        if not self.features:
            raise StructuralError("a schema needs at least one feature")
        names = [f.name for f in self.features]
        if len(set(names)) != len(names):
            raise StructuralError(f"duplicate feature names in {names}")
        for f in self.features:
            if f.kind not in (NUMERIC, CATEGORICAL):
                raise StructuralError(f"feature {f.name!r} has unknown kind {f.kind!r}")
            if f.kind == CATEGORICAL and f.cardinality < 1:
                raise StructuralError(f"categorical feature {f.name!r} has no categories")

    def __len__(self) -> int:
        return len(self.features)

    @property
    def numeric(self) -> list[Feature]:
        return [f for f in self.features if f.kind == NUMERIC]

    @property
    def categorical(self) -> list[Feature]:
        return [f for f in self.features if f.kind == CATEGORICAL]

    def to_dict(self) -> dict:
        return {"features": [{"name": f.name, "kind": f.kind, "categories": list(f.categories)}
                             for f in self.features]}

    @classmethod
    def from_dict(cls, d: dict) -> "FeatureSchema":
        return cls(tuple(Feature(f["name"], f["kind"], tuple(f["categories"])) for f in d["features"]))


@dataclass(frozen=True)
class EncoderConfig:
    embed_dim: int = 16
    n_blocks: int = 2
    hidden_mult: float = 2.0
    dropout: float = 0.1
    numeric_embedding: bool = True

    def hidden_width(self, n_features: int) -> int:
        return max(1, int(round(self.hidden_mult * n_features * self.embed_dim)))


def _uniform(rng: Rng, fan_in: int, shape) -> np.ndarray:
    bound = 1.0 / np.sqrt(fan_in)
    return (2.0 * rng.uniform(shape) - 1.0) * bound


@dataclass
class EncoderParameters:
    """Encoder weights (``params``) and batch-norm running statistics (``buffers``)."""

    config: EncoderConfig
    schema: FeatureSchema
    params: dict[str, np.ndarray] = field(default_factory=dict)
    buffers: dict[str, dict[str, np.ndarray]] = field(default_factory=dict)

    @property
    def width(self) -> int:
        return len(self.schema) * self.config.embed_dim

    @classmethod
    def init(cls, schema: FeatureSchema, config: EncoderConfig, rng: Rng) -> "EncoderParameters":
        D = config.embed_dim
        if D < 1 or config.n_blocks < 0:
            raise StructuralError("embed_dim must be >= 1 and n_blocks >= 0")
        n_num = len(schema.numeric)
        p: dict[str, np.ndarray] = {}
        if n_num:
            if config.numeric_embedding:
                p["num.w1"] = _uniform(rng, 1, (n_num, D))
                p["num.b1"] = _uniform(rng, 1, (n_num, D))
                p["num.w2"] = _uniform(rng, D, (n_num, D, D))
                p["num.b2"] = _uniform(rng, D, (n_num, D))
            else:
                p["num.w"] = _uniform(rng, 1, (n_num, D))
                p["num.b"] = _uniform(rng, 1, (n_num, D))
        for j, f in enumerate(schema.categorical):
            p[f"cat{j}.table"] = rng.normal((f.cardinality + 1, D))
        width = len(schema) * D
        hidden = config.hidden_width(len(schema))
        buffers = {}
        for b in range(config.n_blocks):
            p[f"block{b}.bn_gamma"] = np.ones(width)
            p[f"block{b}.bn_beta"] = np.zeros(width)
            p[f"block{b}.lin1_w"] = _uniform(rng, width, (width, hidden))
            p[f"block{b}.lin1_b"] = _uniform(rng, width, (hidden,))
            p[f"block{b}.lin2_w"] = _uniform(rng, hidden, (hidden, width))
            p[f"block{b}.lin2_b"] = _uniform(rng, hidden, (width,))
            buffers[f"block{b}"] = {"mean": np.zeros(width), "var": np.ones(width)}
        return cls(config, schema, p, buffers)


def embed_numeric(g: Graph, x: Node, p: dict[str, Node], numeric_embedding: bool = True) -> Node:
    """``(N, Fn)`` numeric inputs -> ``(N, Fn, D)`` embeddings."""
    x3 = g.reshape(x, (x.shape[0], x.shape[1], 1))
    if not numeric_embedding:
        return x3 * p["num.w"] + p["num.b"]
    hidden = g.relu(x3 * p["num.w1"] + p["num.b1"])
    return g.einsum("nfd,fde->nfe", hidden, p["num.w2"]) + p["num.b2"]


def embed_numeric_value(x_i: float, w1, b1, w2, b2) -> np.ndarray:
    """Embedding of one scalar through one feature's MLP (plain numpy)."""
    if not np.isfinite(x_i):
        raise NumericError("non-finite numeric input; preprocess missing values first")
    return np.maximum(x_i * np.asarray(w1) + b1, 0.0) @ np.asarray(w2) + b2


def embed_categorical(g: Graph, index, table: Node) -> Node:
    """Rows of ``table`` for integer ``index`` (last row = unknown category)."""
    return g.take(table, index, axis=0)


def assemble_h0(g: Graph, embeddings: list[Node], embed_dim: int | None = None) -> Node:
    """Concatenate per-feature ``(N, D)`` embeddings into ``(N, F * D)``."""
    if not embeddings:
        raise StructuralError("no embeddings to assemble")
    D = embed_dim if embed_dim is not None else embeddings[0].shape[-1]
    for e in embeddings:
        if e.ndim != 2 or e.shape[1] != D:
            raise StructuralError(f"embedding of shape {e.shape} does not have width {D}")
    return g.concat(embeddings, axis=1)


def resnet_block(g: Graph, h: Node, p: dict[str, Node], prefix: str, running: dict,
                 train: bool, dropout: float, rng: Rng | None) -> Node:
    z = g.batch_norm(h, p[f"{prefix}.bn_gamma"], p[f"{prefix}.bn_beta"], running, train)
    z = g.dropout(z @ p[f"{prefix}.lin1_w"] + p[f"{prefix}.lin1_b"], dropout, rng, train)
    z = g.relu(z)
    z = g.dropout(z @ p[f"{prefix}.lin2_w"] + p[f"{prefix}.lin2_b"], dropout, rng, train)
    return h + z


def encode(g: Graph, x_num: np.ndarray, x_cat: np.ndarray, enc: EncoderParameters,
           p: dict[str, Node], train: bool = False, rng: Rng | None = None) -> Node:
    """Full pipeline to the conditioning vector ``(N, F * D)``."""
    schema, cfg = enc.schema, enc.config
    x_num = np.asarray(x_num, dtype=np.float64)
    x_cat = np.asarray(x_cat, dtype=np.int64)
    n = x_num.shape[0] if x_num.ndim == 2 and x_num.shape[1] else x_cat.shape[0]
    if x_num.shape != (n, len(schema.numeric)) or x_cat.shape != (n, len(schema.categorical)):
        raise StructuralError(f"inputs {x_num.shape}/{x_cat.shape} do not match the schema "
                              f"({len(schema.numeric)} numeric, {len(schema.categorical)} categorical)")
    num_emb = None
    if schema.numeric:
        num_emb = embed_numeric(g, g.constant(x_num), p, cfg.numeric_embedding)
    pieces = []
    i_num = i_cat = 0
    for f in schema.features:
        if f.kind == "numeric":
            pieces.append(num_emb[:, i_num, :])
            i_num += 1
        else:
            idx = x_cat[:, i_cat]
            if idx.size and (idx.min() < 0 or idx.max() > f.cardinality):
                raise StructuralError(f"category index out of range for {f.name!r}")
            pieces.append(embed_categorical(g, idx, p[f"cat{i_cat}.table"]))
            i_cat += 1
    h = assemble_h0(g, pieces, cfg.embed_dim)
    for b in range(cfg.n_blocks):
        h = resnet_block(g, h, p, f"block{b}", enc.buffers[f"block{b}"], train, cfg.dropout, rng)
    return h
