import numpy as np
import pytest

from tabflow.data import SchemaDeclaration, fit_preprocessor, table_from_columns, transform
from tabflow.encoder import EncoderConfig
from tabflow.model import DensityModel, FlowConfig
from tabflow.rng import Rng

DECL = SchemaDeclaration.parse("x1: numeric\nx2: numeric\ncolour: categorical\ny: target\n")


def synthetic_table(n=200, seed=0, y_fn=None):
    r = np.random.default_rng(seed)
    x1, x2 = r.normal(size=n), r.uniform(-1, 1, size=n)
    colour = r.choice(["red", "green", "blue"], size=n)
    y = y_fn(r, x1, x2) if y_fn else 1.5 * x1 - x2 + 0.3 * r.normal(size=n) + 10.0
    return table_from_columns({"x1": x1, "x2": x2, "colour": colour, "y": y})


def synthetic_dataset(n=200, seed=0, **kw):
    table = synthetic_table(n, seed, **kw)
    pre = fit_preprocessor(table, DECL)
    return transform(table, pre)


def random_model(dataset, seed=0, head="spline", n_bins=6, n_layers=1, scale=1.0, embed_dim=4,
                 n_blocks=1, dropout=0.1):
    """Untrained model with a random (non-zero) head so the flow is far from identity."""
    enc = EncoderConfig(embed_dim=embed_dim, n_blocks=n_blocks, hidden_mult=1.0, dropout=dropout)
    flow = FlowConfig(n_bins=n_bins, tail_bound=3.0, n_layers=n_layers, head=head)
    model = DensityModel.init(dataset.preprocessor, enc, flow, Rng(seed), zero_head=False)
    model.params["head.w"] *= scale
    model.params["head.b"] += scale * Rng(seed).split("bias").normal(model.params["head.b"].shape)
    return model.eval()


@pytest.fixture
def dataset():
    return synthetic_dataset()
