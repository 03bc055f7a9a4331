"""Run configuration and the train / evaluate / benchmark / tune pipelines behind the CLI."""
from __future__ import annotations

import configparser
import dataclasses
import json
import logging
import math
import os
import time
from dataclasses import dataclass, field, fields, replace
from pathlib import Path

import numpy as np

from . import metrics as M
from .data import (Preprocessor, RawTable, SchemaDeclaration, TabularDataset, chrono_split, cv_splits,
                   fit_preprocessor, load_csv, transform)
from .encoder import EncoderConfig
from .errors import ConfigurationError, StructuralError, TabFlowError
from .model import DensityModel, FlowConfig, TrainConfig, train
from .rng import Rng

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class DataSpec:
    path: str = ""
    schema: str = ""
    split: str = "cv"
    n_splits: int = 5
    split_index: int = 0
    test_fraction: float = 0.1
    val_fraction: float = 0.1
    date_column: str = ""
    train_end: str = ""
    val_end: str = ""
    test_end: str = ""
    input: str = ""


@dataclass(frozen=True)
class TrainSpec:
    batch_size: int = 2048
    max_epochs: int = 500
    patience: int = 20
    lr: float = 1e-3
    seed: int = 0


@dataclass(frozen=True)
class MetricSpec:
    confidence_method: str = "both"
    n_samples: int = 1000
    risk: str = "mape"


@dataclass(frozen=True)
class TuneSpec:
    budget: int = 20
    max_epochs: int = 100


@dataclass(frozen=True)
class OutputSpec:
    dir: str = "out"


SECTIONS = {
    "data": DataSpec,
    "train": TrainSpec,
    "encoder": EncoderConfig,
    "flow": FlowConfig,
    "metrics": MetricSpec,
    "tune": TuneSpec,
    "output": OutputSpec,
}


@dataclass(frozen=True)
class RunConfig:
    data: DataSpec = DataSpec()
    train: TrainSpec = TrainSpec()
    encoder: EncoderConfig = EncoderConfig()
    flow: FlowConfig = FlowConfig()
    metrics: MetricSpec = MetricSpec()
    tune: TuneSpec = TuneSpec()
    output: OutputSpec = OutputSpec()
    base_dir: str = "."

    def __post_init__(self):
        if self.data.split not in ("cv", "chrono"):
            raise ConfigurationError(f"data.split must be 'cv' or 'chrono', got {self.data.split!r}")
        if self.metrics.confidence_method not in M.CONFIDENCE_METHODS + ("both",):
            raise ConfigurationError(f"unknown confidence method {self.metrics.confidence_method!r}")
        if self.metrics.risk not in ("mape", "rmse"):
            raise ConfigurationError(f"metrics.risk must be 'mape' or 'rmse', got {self.metrics.risk!r}")
        if self.metrics.n_samples < 2:
            raise ConfigurationError("metrics.n_samples must be at least 2")
        if self.tune.budget < 1:
            raise ConfigurationError("tune.budget must be at least 1")
        if self.data.n_splits < 1:
            raise ConfigurationError("data.n_splits must be at least 1")

    @property
    def seed(self) -> int:
        return self.train.seed

    def resolve(self, path: str) -> Path:
        p = Path(path)
        return p if p.is_absolute() else Path(self.base_dir) / p

    @property
    def out_dir(self) -> Path:
        return self.resolve(self.output.dir)

    def train_config(self, max_epochs: int | None = None) -> TrainConfig:
        t = self.train
        return TrainConfig(batch_size=t.batch_size, max_epochs=max_epochs or t.max_epochs, patience=t.patience,
                           lr=t.lr, seed=t.seed, encoder=self.encoder, flow=self.flow)

    def to_dict(self) -> dict:
        return {name: dataclasses.asdict(getattr(self, name)) for name in SECTIONS}

    def to_ini(self) -> str:
        lines = []
        for name in SECTIONS:
            lines.append(f"[{name}]")
            for k, v in dataclasses.asdict(getattr(self, name)).items():
                lines.append(f"{k} = {v}")
            lines.append("")
        return "\n".join(lines)


def _convert(section: str, key: str, raw: str, default):
    try:
        if isinstance(default, bool):
            low = raw.strip().lower()
            if low not in ("1", "0", "true", "false", "yes", "no", "on", "off"):
                raise ValueError(raw)
            return low in ("1", "true", "yes", "on")
        if isinstance(default, int):
            return int(raw)
        if isinstance(default, float):
            return float(raw)
    except ValueError:
        raise ConfigurationError(f"[{section}] {key}: cannot parse {raw!r} as {type(default).__name__}") from None
    return raw.strip()


def build_config(sections: dict[str, dict[str, str]], base_dir: str = ".") -> RunConfig:
    """Typed config from ``{section: {key: raw string}}``; unknown names are errors."""
    parts = {}
    for section, values in sections.items():
        if section not in SECTIONS:
            raise ConfigurationError(f"unknown config section [{section}] (known: {', '.join(SECTIONS)})")
        cls = SECTIONS[section]
        defaults = {f.name: f.default for f in fields(cls)}
        kwargs = {}
        for key, raw in values.items():
            if key not in defaults:
                raise ConfigurationError(f"unknown key {key!r} in [{section}] (known: {', '.join(defaults)})")
            kwargs[key] = _convert(section, key, raw, defaults[key])
        try:
            parts[section] = cls(**kwargs)
        except TypeError as err:
            raise ConfigurationError(f"[{section}]: {err}") from err
    return RunConfig(**parts, base_dir=base_dir)


def load_config(path, overrides: dict[str, dict[str, str]] | None = None) -> RunConfig:
    parser = configparser.ConfigParser(inline_comment_prefixes=(";", "#"), interpolation=None)
    parser.optionxform = str
    try:
        with open(path, encoding="utf-8") as fh:
            parser.read_file(fh)
    except OSError as err:
        raise ConfigurationError(f"cannot read config {os.fspath(path)!r}: {err.strerror}") from err
    except configparser.Error as err:
        raise ConfigurationError(f"malformed config {os.fspath(path)!r}: {err}") from err
    sections = {s: dict(parser[s]) for s in parser.sections()}
    for s, kv in (overrides or {}).items():
        sections.setdefault(s, {}).update(kv)
    return build_config(sections, base_dir=str(Path(path).resolve().parent))


# --------------------------------------------------------------------------
# data plumbing
# --------------------------------------------------------------------------

@dataclass
class SplitData:
    index: int
    train: TabularDataset
    val: TabularDataset
    test: TabularDataset
    preprocessor: Preprocessor


def load_declaration(cfg: RunConfig) -> SchemaDeclaration:
    if not cfg.data.schema:
        raise ConfigurationError("no schema file configured ([data] schema)")
    return SchemaDeclaration.load(cfg.resolve(cfg.data.schema))


def load_table(cfg: RunConfig, declaration: SchemaDeclaration) -> RawTable:
    if not cfg.data.path:
        raise ConfigurationError("no data file configured ([data] path)")
    return load_csv(cfg.resolve(cfg.data.path), declaration)


def raw_split(cfg: RunConfig, table: RawTable, index: int) -> tuple[RawTable, RawTable, RawTable]:
    d = cfg.data
    if d.split == "chrono":
        if not (d.date_column and d.train_end and d.val_end and d.test_end):
            raise ConfigurationError("chrono split needs date_column, train_end, val_end and test_end")
        return chrono_split(table, d.date_column, d.train_end, d.val_end, d.test_end)
    if not 0 <= index < d.n_splits:
        raise ConfigurationError(f"split index {index} outside 0..{d.n_splits - 1}")
    tr, va, te = cv_splits(len(table), index + 1, d.test_fraction, d.val_fraction, cfg.seed)[index]
    return (table.subset(tr, split=f"cv{index}:train"), table.subset(va, split=f"cv{index}:val"),
            table.subset(te, split=f"cv{index}:test"))


def prepare_split(cfg: RunConfig, index: int, table: RawTable | None = None,
                  declaration: SchemaDeclaration | None = None) -> SplitData:
    declaration = declaration or load_declaration(cfg)
    table = table if table is not None else load_table(cfg, declaration)
    tr, va, te = raw_split(cfg, table, index)
    if len(va) == 0 or len(te) == 0:
        raise StructuralError(f"split {index}: empty validation or test part")
    pre = fit_preprocessor(tr, declaration)
    return SplitData(index, transform(tr, pre), transform(va, pre), transform(te, pre), pre)


def fit(cfg: RunConfig, split: SplitData, max_epochs: int | None = None):
    return train(split.train, cfg.train_config(max_epochs), split.val)


# --------------------------------------------------------------------------
# evaluation
# --------------------------------------------------------------------------

@dataclass
class Evaluation:
    summary: dict
    rows: dict[str, np.ndarray] = field(default_factory=dict)


def evaluate(model: DensityModel, data: TabularDataset, n_samples: int, seed: int,
             chunk: int = 1024) -> Evaluation:
    """Test metrics plus per-row predictions; sampling uses stream ``(seed, "sampling")``."""
    if data.y is None:
        raise StructuralError("evaluation data has no target column")
    if n_samples < 2:
        raise StructuralError("evaluation needs at least 2 samples per row")
    rng = Rng(seed).split("sampling")
    y = data.y_raw
    cols = {k: np.empty(len(data)) for k in ("log_density", "mean", "median", "std", "entropy", "crps")}
    for start in range(0, len(data), chunk):
        sl = slice(start, min(len(data), start + chunk))
        dist = model.predictive((data.x_num[sl], data.x_cat[sl]))
        samples, logp = dist.sample_with_log_density(n_samples, rng)
        cols["log_density"][sl] = dist.log_density(y[sl])
        cols["mean"][sl] = samples.mean(axis=1)
        cols["median"][sl] = dist.median()
        cols["std"][sl] = samples.std(axis=1, ddof=1)
        cols["entropy"][sl] = -logp.mean(axis=1)
        cols["crps"][sl] = M.crps_rows(samples, y[sl])
    try:
        mape = M.mape(cols["mean"], y)
    except StructuralError:
        mape = None
    summary = {
        "nll": M.nll_metric(cols["log_density"]),
        "rmse": M.rmse(cols["mean"], y),
        "mape": mape,
        "crps": float(cols["crps"].mean()),
        "seed": seed,
        "n_samples": n_samples,
        "n_rows": len(data),
    }
    return Evaluation(summary, {"y": y, **cols})


def confidences(ev: Evaluation, method: str) -> np.ndarray:
    if method == "inv_std":
        return 1.0 / ev.rows["std"]
    if method == "neg_entropy":
        return -ev.rows["entropy"]
    raise StructuralError(f"unknown confidence method {method!r}")


def risk_curve(ev: Evaluation, method: str, risk: str) -> M.RiskCoverageCurve:
    y, pred = ev.rows["y"], ev.rows["mean"]
    if risk == "mape":
        if (np.abs(y) <= M.MAPE_EPS).any():
            raise StructuralError("MAPE risk is undefined for zero targets; set [metrics] risk = rmse")
        curve = M.risk_coverage(confidences(ev, method), 100.0 * np.abs(pred - y) / np.abs(y), risk_name="mape")
    else:
        sq = M.risk_coverage(confidences(ev, method), (pred - y) ** 2, risk_name="rmse")
        curve = M.RiskCoverageCurve(sq.coverage, tuple(math.sqrt(v) for v in sq.risk), "rmse")
    return M.with_aurc(curve)


def methods(cfg: RunConfig) -> tuple[str, ...]:
    m = cfg.metrics.confidence_method
    return M.CONFIDENCE_METHODS if m == "both" else (m,)


# --------------------------------------------------------------------------
# benchmark
# --------------------------------------------------------------------------

def _write_json(path: Path, doc) -> None:
    tmp = path.with_suffix(path.suffix + ".tmp")
    with open(tmp, "w") as fh:
        json.dump(doc, fh, indent=2, sort_keys=True)
        fh.write("\n")
    os.replace(tmp, path)


def _mean_std(values: list[float]) -> dict:
    if not values:
        return {"mean": None, "std": "NA", "n": 0}
    arr = np.asarray(values, dtype=np.float64)
    std = float(arr.std(ddof=1)) if len(arr) > 1 else "NA"
    return {"mean": float(arr.mean()), "std": std, "n": len(arr)}


def _table_cell(agg: dict) -> str:
    if agg["mean"] is None:
        return "NA"
    std = "NA" if agg["std"] == "NA" else f"{agg['std']:.2f}"
    return f"{agg['mean']:.2f} ± {std}"


def run_split(cfg: RunConfig, index: int, table: RawTable, declaration: SchemaDeclaration) -> dict:
    t0 = time.perf_counter()
    split = prepare_split(cfg, index, table, declaration)
    model, history = fit(cfg, split)
    t1 = time.perf_counter()
    ev = evaluate(model, split.test, cfg.metrics.n_samples, cfg.seed)
    t2 = time.perf_counter()
    best = min(history, key=lambda r: r["val_nll"])
    return {
        "split": index, "status": "ok", **ev.summary,
        "best_epoch": best["epoch"], "val_nll": best["val_nll"], "epochs": len(history),
        "n_train": len(split.train), "n_val": len(split.val), "n_test": len(split.test),
        "train_seconds": t1 - t0, "eval_seconds": t2 - t1,
        "preprocessor": split.preprocessor.fingerprint,
    }


def run_benchmark(cfg: RunConfig, out: Path, n_splits: int | None = None) -> dict:
    """All CV splits with per-split result files; completed splits are reused on rerun."""
    if cfg.data.split != "cv":
        raise ConfigurationError("the benchmark runs cross-validation splits; set [data] split = cv")
    n_splits = n_splits or cfg.data.n_splits
    if n_splits != cfg.data.n_splits:
        cfg = replace(cfg, data=replace(cfg.data, n_splits=n_splits))
    out.mkdir(parents=True, exist_ok=True)
    declaration = load_declaration(cfg)
    table = load_table(cfg, declaration)
    records = []
    for i in range(n_splits):
        path = out / f"split_{i}.json"
        if path.exists():
            with open(path) as fh:
                rec = json.load(fh)
            if rec.get("status") == "ok":
                records.append(rec)
                continue
        try:
            rec = run_split(cfg, i, table, declaration)
        except TabFlowError as err:
            rec = {"split": i, "status": "failed", "error": f"{type(err).__name__}: {err}"}
        log.info("split %d: %s", i, rec.get("nll", rec.get("error")))
        _write_json(path, rec)
        records.append(rec)
    ok = [r for r in records if r["status"] == "ok"]
    results = {
        "dataset": cfg.data.path,
        "n_splits": n_splits,
        "completed": len(ok),
        "failed": [r for r in records if r["status"] != "ok"],
        "partial": len(ok) < n_splits,
        "seed": cfg.seed,
    }
    for key in ("nll", "rmse", "crps"):
        agg = _mean_std([r[key] for r in ok])
        results[key] = agg
        results[f"{key}_table"] = _table_cell(agg)
    _write_json(out / "results.json", results)
    return results


# --------------------------------------------------------------------------
# random-search tuner
# --------------------------------------------------------------------------

SEARCH_SPACE = {
    "embed_dim": ("choice", (8, 16, 32)),
    "n_blocks": ("choice", (1, 2, 3, 4)),
    "hidden_mult": ("uniform", (0.5, 2.0)),
    "dropout": ("uniform", (0.0, 0.3)),
    "n_bins": ("int", (4, 24)),
    "tail_bound": ("uniform", (2.0, 5.0)),
    "n_layers": ("choice", (1, 2, 3)),
    "lr": ("loguniform", (1e-4, 1e-2)),
}


def sample_trial(rng: Rng) -> dict:
    out = {}
    for name, (kind, spec) in SEARCH_SPACE.items():
        if kind == "choice":
            out[name] = spec[int(rng.integers(0, len(spec)))]
        elif kind == "int":
            out[name] = int(rng.integers(spec[0], spec[1] + 1))
        elif kind == "uniform":
            out[name] = float(spec[0] + (spec[1] - spec[0]) * rng.uniform(None))
        else:
            lo, hi = math.log(spec[0]), math.log(spec[1])
            out[name] = float(math.exp(lo + (hi - lo) * rng.uniform(None)))
    return out


def apply_trial(cfg: RunConfig, params: dict) -> RunConfig:
    return replace(
        cfg,
        encoder=replace(cfg.encoder, embed_dim=params["embed_dim"], n_blocks=params["n_blocks"],
                        hidden_mult=params["hidden_mult"], dropout=params["dropout"]),
        flow=replace(cfg.flow, n_bins=params["n_bins"], tail_bound=params["tail_bound"],
                     n_layers=params["n_layers"]),
        train=replace(cfg.train, lr=params["lr"]),
    )


def run_tune(cfg: RunConfig, out: Path, budget: int | None = None) -> dict:
    """Random search scored by best validation NLL on split ``data.split_index``."""
    budget = budget or cfg.tune.budget
    if budget < 1:
        raise ConfigurationError("tuning budget must be at least 1")
    out.mkdir(parents=True, exist_ok=True)
    split = prepare_split(cfg, cfg.data.split_index)
    root = Rng(cfg.seed).split("tuner")
    trials = []
    with open(out / "trials.jsonl", "w") as fh:
        for t in range(budget):
            params = sample_trial(root.split(t))
            rec = {"trial": t, "params": params}
            try:
                trial_cfg = apply_trial(cfg, params)
                _, history = fit(trial_cfg, split, max_epochs=cfg.tune.max_epochs)
                best = min(history, key=lambda r: r["val_nll"])
                rec.update(status="ok", val_nll=best["val_nll"], best_epoch=best["epoch"], epochs=len(history))
            except TabFlowError as err:
                rec.update(status="failed", error=f"{type(err).__name__}: {err}")
            fh.write(json.dumps(rec, sort_keys=True) + "\n")
            fh.flush()
            trials.append(rec)
    ok = [r for r in trials if r["status"] == "ok"]
    if not ok:
        raise StructuralError("all tuning trials failed: " + "; ".join(r["error"] for r in trials))
    best = min(ok, key=lambda r: r["val_nll"])
    best_cfg = apply_trial(cfg, best["params"])
    # Absolute paths so the file works from the output directory.
    best_cfg = replace(best_cfg, data=replace(best_cfg.data, path=str(cfg.resolve(cfg.data.path)),
                                              schema=str(cfg.resolve(cfg.data.schema))))
    with open(out / "best_config.ini", "w") as fh:
        fh.write(best_cfg.to_ini())
    return {"best": best, "config": best_cfg, "trials": trials}
