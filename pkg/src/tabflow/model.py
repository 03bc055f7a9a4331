"""Conditional density model: tabular encoder -> linear head -> spline flow (or Gaussian).

The target is standardised with the training mean and std before it reaches
the flow; every density reported in original units subtracts ``log std``.
"""
from __future__ import annotations

import copy
import io
import json
import logging
import math
from dataclasses import asdict, dataclass, field

import numpy as np
from scipy.special import ndtr

from . import spline
from .autodiff import Graph, Node
from .data import Preprocessor, TabularDataset
from .encoder import EncoderConfig, EncoderParameters, FeatureSchema, encode
from .errors import ConfigurationError, NumericError, StructuralError
from .optim import AdamState, adam_step
from .rng import Rng

log = logging.getLogger(__name__)

HALF_LOG_2PI = 0.5 * math.log(2.0 * math.pi)
FORMAT = "tabflow-model"
FORMAT_VERSION = 1
HEADS = ("spline", "gaussian")


@dataclass(frozen=True)
class FlowConfig:
    n_bins: int = 8
    tail_bound: float = 3.0
    n_layers: int = 1
    head: str = "spline"

    def __post_init__(self):
        if self.head not in HEADS:
            raise ConfigurationError(f"head must be one of {HEADS}, got {self.head!r}")
        if self.n_layers < 1:
            raise ConfigurationError("flow needs at least one layer")
        if self.head == "spline":
            spline._check_config(self.n_bins, self.tail_bound, spline.MIN_BIN_WIDTH, spline.MIN_BIN_HEIGHT)

    @property
    def head_width(self) -> int:
        if self.head == "gaussian":
            return 2
        return self.n_layers * spline.raw_size(self.n_bins)


@dataclass
class TrainConfig:
    batch_size: int = 2048
    max_epochs: int = 500
    patience: int = 20
    lr: float = 1e-3
    seed: int = 0
    val_fraction: float = 0.1
    encoder: EncoderConfig = field(default_factory=EncoderConfig)
    flow: FlowConfig = field(default_factory=FlowConfig)

    def __post_init__(self):
        if self.batch_size < 2:
            raise ConfigurationError("batch size must be at least 2 (batch norm needs batch statistics)")
        if self.patience < 1:
            raise ConfigurationError("patience must be at least 1")
        if not 0 < self.val_fraction < 1:
            raise ConfigurationError("validation fraction must lie in (0, 1)")
        if self.max_epochs < 1:
            raise ConfigurationError("max_epochs must be at least 1")


class DensityModel:
    """Trainable conditional density ``p(y | x)``; see the module docstring."""

    def __init__(self, encoder: EncoderParameters, flow: FlowConfig, preprocessor: Preprocessor,
                 head: dict[str, np.ndarray]):
        self.encoder = encoder
        self.flow = flow
        self.preprocessor = preprocessor
        if preprocessor.target_std <= 0:
            raise StructuralError("target std must be positive")
        if head["head.w"].shape != (encoder.width, flow.head_width):
            raise StructuralError(f"head weight {head['head.w'].shape} does not map "
                                  f"{encoder.width} -> {flow.head_width}")
        # One flat dict shared with the encoder so in-place updates reach both.
        self.params = encoder.params
        self.params.update(head)
        self.training = False

    @classmethod
    def init(cls, preprocessor: Preprocessor, encoder_config: EncoderConfig = EncoderConfig(),
             flow: FlowConfig = FlowConfig(), rng: Rng | None = None,
             zero_head: bool = True) -> "DensityModel":
        rng = rng or Rng(0)
        enc = EncoderParameters.init(preprocessor.schema, encoder_config, rng.split("encoder"))
        if zero_head:
            w = np.zeros((enc.width, flow.head_width))
            b = np.zeros(flow.head_width)
        else:
            hr = rng.split("head")
            bound = 1.0 / math.sqrt(enc.width)
            w = (2.0 * hr.uniform((enc.width, flow.head_width)) - 1.0) * bound
            b = (2.0 * hr.uniform(flow.head_width) - 1.0) * bound
        return cls(enc, flow, preprocessor, {"head.w": w, "head.b": b})

    @property
    def schema(self) -> FeatureSchema:
        return self.encoder.schema

    @property
    def target_mean(self) -> float:
        return self.preprocessor.target_mean

    @property
    def target_std(self) -> float:
        return self.preprocessor.target_std

    def train(self) -> "DensityModel":
        self.training = True
        return self

    def eval(self) -> "DensityModel":
        self.training = False
        return self

    # -- graph construction --------------------------------------------------

    def head_output(self, g: Graph, p: dict[str, Node], x_num, x_cat, train: bool,
                    rng: Rng | None) -> Node:
        h = encode(g, x_num, x_cat, self.encoder, p, train, rng)
        return h @ p["head.w"] + p["head.b"]

    def spline_layers_graph(self, g: Graph, out: Node) -> list[tuple[Node, Node, Node]]:
        k = spline.raw_size(self.flow.n_bins)
        return [spline.constrain_graph(g, out[:, i * k:(i + 1) * k], self.flow.n_bins, self.flow.tail_bound)
                for i in range(self.flow.n_layers)]

    def log_prob_graph(self, g: Graph, p: dict[str, Node], x_num, x_cat, y_std,
                       train: bool, rng: Rng | None) -> Node:
        """Per-row log density of the standardised target, shape ``(N, 1)``."""
        out = self.head_output(g, p, x_num, x_cat, train, rng)
        y = g.constant(np.asarray(y_std, dtype=np.float64).reshape(-1, 1))
        if self.flow.head == "gaussian":
            mu, logvar = out[:, 0:1], out[:, 1:2]
            return -HALF_LOG_2PI - 0.5 * logvar - 0.5 * g.square(y - mu) * g.exp(-logvar)
        z, lad = spline.stack_inverse_graph(g, y, self.spline_layers_graph(g, out), self.flow.tail_bound)
        return -HALF_LOG_2PI - 0.5 * g.square(z) + lad

    def loss_graph(self, g: Graph, p: dict[str, Node], x_num, x_cat, y_std,
                   train: bool = True, rng: Rng | None = None) -> Node:
        """Mean negative log-likelihood in standardised units."""
        return -g.mean(self.log_prob_graph(g, p, x_num, x_cat, y_std, train, rng))

    # -- inference -------------------------------------------------------------

    def _head_values(self, x_num, x_cat) -> np.ndarray:
        g = Graph()
        p = {k: g.constant(v) for k, v in self.params.items()}
        return self.head_output(g, p, x_num, x_cat, train=False, rng=None).value

    def predictive(self, data) -> "PredictiveDistribution":
        """Predictive distributions for every row of ``data`` (eval mode)."""
        x_num, x_cat = features_of(data)
        out = self._head_values(x_num, x_cat)
        if self.flow.head == "gaussian":
            return PredictiveDistribution(self.target_mean, self.target_std,
                                          mu=out[:, 0], sigma=np.exp(0.5 * out[:, 1]))
        k = spline.raw_size(self.flow.n_bins)
        layers = [spline.constrain(out[:, i * k:(i + 1) * k], self.flow.n_bins, self.flow.tail_bound)
                  for i in range(self.flow.n_layers)]
        return PredictiveDistribution(self.target_mean, self.target_std, layers=layers)


def features_of(data) -> tuple[np.ndarray, np.ndarray]:
    if isinstance(data, TabularDataset):
        return data.x_num, data.x_cat
    x_num, x_cat = data
    return np.asarray(x_num, dtype=np.float64), np.asarray(x_cat, dtype=np.int64)


class PredictiveDistribution:
    """Predictive distributions for ``R`` rows, in original target units."""

    def __init__(self, target_mean: float, target_std: float, layers: list[spline.SplineParams] | None = None,
                 mu: np.ndarray | None = None, sigma: np.ndarray | None = None):
        if (layers is None) == (mu is None):
            raise StructuralError("give either spline layers or Gaussian parameters")
        self.target_mean = float(target_mean)
        self.target_std = float(target_std)
        self.layers = layers
        self.mu = mu
        self.sigma = sigma

    @property
    def kind(self) -> str:
        return "gaussian" if self.layers is None else "spline"

    def __len__(self) -> int:
        return len(self.mu) if self.layers is None else len(self.layers[0])

    def __getitem__(self, i) -> "PredictiveDistribution":
        sl = slice(i, i + 1) if isinstance(i, (int, np.integer)) else i
        if self.layers is None:
            return PredictiveDistribution(self.target_mean, self.target_std, mu=self.mu[sl], sigma=self.sigma[sl])
        layers = [spline.SplineParams(p.knot_x[sl], p.knot_y[sl], p.derivatives[sl], p.tail_bound)
                  for p in self.layers]
        return PredictiveDistribution(self.target_mean, self.target_std, layers=layers)

    def _rows(self, y) -> np.ndarray:
        y = np.asarray(y, dtype=np.float64)
        if y.ndim == 0:
            y = np.full(len(self), float(y))
        if y.shape[0] != len(self):
            raise StructuralError(f"{len(self)} distributions but values of shape {y.shape}")
        return y

    def _to_base(self, y) -> tuple[np.ndarray, np.ndarray]:
        """Base-space point and log|d z / d y_std| for standardised ``y``."""
        ys = (self._rows(y) - self.target_mean) / self.target_std
        if self.layers is None:
            mu, sig = self._bcast(self.mu, ys), self._bcast(self.sigma, ys)
            return (ys - mu) / sig, -np.log(sig) + np.zeros_like(ys)
        return spline.stack_inverse(ys, self.layers)

    @staticmethod
    def _bcast(a, like):
        return a.reshape((-1,) + (1,) * (like.ndim - 1))

    def log_density(self, y) -> np.ndarray:
        """``log p(y | x)`` in original units; ``y`` is ``(R,)`` or ``(R, S)``."""
        if not np.isfinite(np.asarray(y)).all():
            raise NumericError("non-finite target value")
        z, lad = self._to_base(y)
        return -HALF_LOG_2PI - 0.5 * z * z + lad - math.log(self.target_std)

    def cdf(self, y) -> np.ndarray:
        return ndtr(self._to_base(y)[0])

    def _from_base(self, z) -> tuple[np.ndarray, np.ndarray]:
        if self.layers is None:
            mu, sig = self._bcast(self.mu, z), self._bcast(self.sigma, z)
            ys, lad = mu + sig * z, np.log(sig) + np.zeros_like(z)
        else:
            ys, lad = spline.stack_forward(z, self.layers)
        return ys * self.target_std + self.target_mean, lad

    def sample(self, n: int, rng: Rng) -> np.ndarray:
        """``(R, n)`` draws."""
        return self.sample_with_log_density(n, rng)[0]

    def sample_with_log_density(self, n: int, rng: Rng) -> tuple[np.ndarray, np.ndarray]:
        if n < 0:
            raise StructuralError("sample count must be non-negative")
        z = rng.normal((len(self), n))
        y, lad = self._from_base(z)
        logp = -HALF_LOG_2PI - 0.5 * z * z - lad - math.log(self.target_std)
        return y, logp

    def median(self) -> np.ndarray:
        return self._from_base(np.zeros((len(self), 1)))[0][:, 0]

    def mean(self, n: int = 1000, rng: Rng | None = None) -> np.ndarray:
        if n < 1:
            raise StructuralError("the mean estimate needs at least one sample")
        return self.sample(n, rng or Rng(0)).mean(axis=1)

    def std(self, n: int = 1000, rng: Rng | None = None) -> np.ndarray:
        if n < 2:
            raise StructuralError("the std estimate needs at least two samples")
        return self.sample(n, rng or Rng(0)).std(axis=1, ddof=1)

    def entropy(self, n: int = 1000, rng: Rng | None = None) -> np.ndarray:
        """Monte-Carlo differential entropy ``-mean log p(y_s)``, ``y_s ~ p``."""
        if n < 2:
            raise StructuralError("the entropy estimate needs at least two samples")
        return -self.sample_with_log_density(n, rng or Rng(0))[1].mean(axis=1)


# --------------------------------------------------------------------------
# functional API
# --------------------------------------------------------------------------

CHUNK = 8192


def _chunks(n: int, size: int = CHUNK):
    for start in range(0, n, size):
        yield slice(start, min(n, start + size))


def _subset(data, sl):
    x_num, x_cat = features_of(data)
    return x_num[sl], x_cat[sl]


def log_density(model: DensityModel, data, y) -> np.ndarray:
    """``log p(y | x)`` per row, original units."""
    y = np.asarray(y, dtype=np.float64)
    n = len(y)
    out = np.empty(n)
    for sl in _chunks(n):
        out[sl] = model.predictive(_subset(data, sl)).log_density(y[sl])
    return out


def gaussian_log_density(model: DensityModel, data, y) -> np.ndarray:
    if model.flow.head != "gaussian":
        raise StructuralError("model does not have a Gaussian head")
    return log_density(model, data, y)


def nll_loss(model: DensityModel, data, y_std=None, train: bool = False, rng: Rng | None = None) -> float:
    """Mean NLL in standardised units (training objective)."""
    if y_std is None:
        y_std = data.y
    x_num, x_cat = features_of(data)
    if train and len(y_std) < 2:
        raise StructuralError("train-mode loss needs at least 2 rows")
    g = Graph()
    p = {k: g.constant(v) for k, v in model.params.items()}
    try:
        logp = model.log_prob_graph(g, p, x_num, x_cat, y_std, train, rng)
    except NumericError as err:
        raise NumericError(f"{err}; inspect the rows of this batch") from err
    bad = ~np.isfinite(logp.value[:, 0])
    if bad.any():
        raise NumericError(f"non-finite log density at row {int(np.argmax(bad))}")
    return float(-logp.value.mean())


def evaluate_nll(model: DensityModel, data: TabularDataset) -> float:
    """Mean NLL in original units."""
    return float(-log_density(model, data, data.y_raw).mean())


def sample(model: DensityModel, data, n: int, rng: Rng) -> np.ndarray:
    return model.predictive(data).sample(n, rng)


def predict_point(model: DensityModel, data, statistic: str = "mean", n: int = 1000,
                  rng: Rng | None = None) -> np.ndarray:
    dist = model.predictive(data)
    if statistic == "median":
        return dist.median()
    if statistic == "mean":
        return dist.mean(n, rng)
    raise StructuralError(f"unknown statistic {statistic!r}")


def predictive_std(model: DensityModel, data, n: int = 1000, rng: Rng | None = None) -> np.ndarray:
    return model.predictive(data).std(n, rng)


# --------------------------------------------------------------------------
# training
# --------------------------------------------------------------------------

def _snapshot(model: DensityModel):
    return ({k: v.copy() for k, v in model.params.items()}, copy.deepcopy(model.encoder.buffers))


def _restore(model: DensityModel, snap) -> None:
    params, buffers = snap
    for k, v in params.items():
        model.params[k][...] = v
    for name, stats in buffers.items():
        for k, v in stats.items():
            model.encoder.buffers[name][k][...] = v


def train(dataset: TabularDataset, config: TrainConfig = TrainConfig(),
          validation: TabularDataset | None = None) -> tuple[DensityModel, list[dict]]:
    """Mini-batch Adam on the NLL with early stopping on validation NLL.

    Without an explicit ``validation`` set, ``config.val_fraction`` of
    ``dataset`` is held out. The returned model carries the parameters of
    the best validation epoch; ``history`` has one record per epoch with
    NLLs in original units.
    """
    if len(dataset) == 0:
        raise StructuralError("empty training set")
    if dataset.y is None:
        raise StructuralError("training data has no target")
    root = Rng(config.seed)
    if validation is None:
        perm = root.split("data").permutation(len(dataset))
        n_val = math.ceil(config.val_fraction * len(dataset))
        validation, dataset = dataset.subset(np.sort(perm[:n_val])), dataset.subset(np.sort(perm[n_val:]))
    if len(validation) == 0:
        raise StructuralError("need at least one validation row")
    n = len(dataset)
    if n < 2:
        raise StructuralError("need at least two training rows")

    model = DensityModel.init(dataset.preprocessor, config.encoder, config.flow, root.split("init"))
    state = AdamState(lr=config.lr)
    shuffle_rng, dropout_rng = root.split("shuffle"), root.split("dropout")
    n_batches = math.ceil(n / min(config.batch_size, n))
    log_std = math.log(model.target_std)

    history: list[dict] = []
    best, best_snap, stale = math.inf, _snapshot(model), 0
    for epoch in range(config.max_epochs):
        model.train()
        total, seen = 0.0, 0
        for b, idx in enumerate(np.array_split(shuffle_rng.permutation(n), n_batches)):
            if len(idx) < 2:
                continue
            g = Graph()
            pn = {k: g.param(v, name=k) for k, v in model.params.items()}
            try:
                loss = model.loss_graph(g, pn, dataset.x_num[idx], dataset.x_cat[idx], dataset.y[idx],
                                        train=True, rng=dropout_rng)
                grads = g.backward(loss)
                adam_step(model.params, {k: grads[node] for k, node in pn.items()}, state)
            except NumericError as err:
                raise NumericError(f"epoch {epoch} batch {b}: {err}") from err
            total += float(loss.value) * len(idx)
            seen += len(idx)
        model.eval()
        try:
            val = evaluate_nll(model, validation)
        except NumericError as err:
            raise NumericError(f"epoch {epoch} validation: {err}") from err
        record = {"epoch": epoch, "train_nll": total / max(seen, 1) + log_std, "val_nll": val}
        history.append(record)
        log.debug("epoch %d train %.4f val %.4f", epoch, record["train_nll"], val)
        if val < best:
            best, best_snap, stale = val, _snapshot(model), 0
        else:
            stale += 1
            if stale >= config.patience:
                break
    _restore(model, best_snap)
    return model.eval(), history


# --------------------------------------------------------------------------
# serialisation
# --------------------------------------------------------------------------

def save(model: DensityModel, path) -> None:
    """Write one self-describing ``.npz`` container (JSON header + arrays)."""
    meta = {
        "format": FORMAT,
        "version": FORMAT_VERSION,
        "schema": model.schema.to_dict(),
        "encoder": asdict(model.encoder.config),
        "flow": asdict(model.flow),
        "preprocessor": model.preprocessor.to_dict(),
    }
    arrays = {f"param/{k}": v for k, v in model.params.items()}
    for name, stats in model.encoder.buffers.items():
        for k, v in stats.items():
            arrays[f"buffer/{name}/{k}"] = v
    arrays["meta"] = np.frombuffer(json.dumps(meta, sort_keys=True).encode(), dtype=np.uint8)
    buf = io.BytesIO()
    np.savez(buf, **arrays)
    with open(path, "wb") as fh:
        fh.write(buf.getvalue())


def load(path) -> DensityModel:
    try:
        archive = np.load(path, allow_pickle=False)
    except (OSError, ValueError) as err:
        raise StructuralError(f"cannot read model file {path!r}: {err}") from err
    with archive:
        if "meta" not in archive.files:
            raise StructuralError(f"{path!r} is not a model file")
        meta = json.loads(archive["meta"].tobytes().decode())
        if meta.get("format") != FORMAT or meta.get("version") != FORMAT_VERSION:
            raise StructuralError(f"unsupported model format {meta.get('format')} v{meta.get('version')}")
        params = {k[len("param/"):]: archive[k].copy() for k in archive.files if k.startswith("param/")}
        buffers: dict[str, dict[str, np.ndarray]] = {}
        for k in archive.files:
            if k.startswith("buffer/"):
                _, name, stat = k.split("/")
                buffers.setdefault(name, {})[stat] = archive[k].copy()
    pre = Preprocessor.from_dict(meta["preprocessor"])
    schema = FeatureSchema.from_dict(meta["schema"])
    enc_params = {k: v for k, v in params.items() if not k.startswith("head.")}
    head = {k: v for k, v in params.items() if k.startswith("head.")}
    enc = EncoderParameters(EncoderConfig(**meta["encoder"]), schema, enc_params, buffers)
    return DensityModel(enc, FlowConfig(**meta["flow"]), pre, head).eval()
