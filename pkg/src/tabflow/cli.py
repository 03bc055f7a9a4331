"""Command-line interface: ``tabflow <command> --config run.ini [--seed N] [--out DIR] [--splits K]``."""
from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import metrics as M
from .data import load_csv, transform
from .errors import StructuralError, TabFlowError
from .experiment import (RunConfig, _write_json, evaluate, fit, load_config, load_declaration, load_table,
                         methods, prepare_split, raw_split, risk_curve, run_benchmark, run_tune)
from .model import DensityModel, load, save
from .rng import Rng

log = logging.getLogger("tabflow")

COMMANDS = ("train", "evaluate", "predict", "sample", "riskcov", "benchmark", "tune")


def _out(cfg: RunConfig, args) -> Path:
    out = Path(args.out) if args.out else cfg.out_dir
    out.mkdir(parents=True, exist_ok=True)
    return out


def _model_path(args, out: Path) -> Path:
    return Path(args.model) if args.model else out / "model.bin"


def _load_model(cfg: RunConfig, path: Path) -> DensityModel:
    model = load(path)
    declared = load_declaration(cfg)
    if model.preprocessor.declaration != declared:
        raise StructuralError(f"model {str(path)!r} was trained on a different schema than {cfg.data.schema!r}")
    return model


def _test_data(cfg: RunConfig, model: DensityModel):
    """Test rows of the configured split, transformed with the model's own statistics."""
    declaration = model.preprocessor.declaration
    _, _, test = raw_split(cfg, load_table(cfg, declaration), cfg.data.split_index)
    if len(test) == 0:
        raise StructuralError("the configured split has no test rows")
    return transform(test, model.preprocessor)


def _input_data(cfg: RunConfig, model: DensityModel, args):
    path = args.input or cfg.data.input
    if not path:
        return _test_data(cfg, model)
    return transform(load_csv(cfg.resolve(path), model.preprocessor.declaration, require_target=False), model.preprocessor)


def _write_csv(path: Path, header: list[str], columns: list[np.ndarray]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        for row in zip(*columns):
            w.writerow([repr(float(v)) for v in row])


def cmd_train(cfg: RunConfig, args) -> int:
    out = _out(cfg, args)
    split = prepare_split(cfg, cfg.data.split_index)
    model, history = fit(cfg, split)
    save(model, out / "model.bin")
    _write_json(out / "history.json", history)
    _write_json(out / "config.json", {**cfg.to_dict(), "split": cfg.data.split_index,
                                      "preprocessor": split.preprocessor.fingerprint})
    best = min(history, key=lambda r: r["val_nll"])
    print(f"trained {len(history)} epochs; best val NLL {best['val_nll']:.4f} at epoch {best['epoch']}")
    return 0


def cmd_evaluate(cfg: RunConfig, args) -> int:
    out = _out(cfg, args)
    model = _load_model(cfg, _model_path(args, out))
    ev = evaluate(model, _test_data(cfg, model), cfg.metrics.n_samples, cfg.seed)
    doc = M.metrics_document(**{k: ev.summary[k] for k in ("nll", "rmse", "mape", "crps", "seed", "n_samples")},
                             n_rows=ev.summary["n_rows"])
    M.write_metrics(doc, out / "metrics.json")
    cols = ["y", "mean", "median", "std", "log_density", "crps"]
    _write_csv(out / "predictions.csv", cols, [ev.rows[c] for c in cols])
    print(json.dumps(doc, sort_keys=True))
    return 0


def cmd_predict(cfg: RunConfig, args) -> int:
    out = _out(cfg, args)
    model = _load_model(cfg, _model_path(args, out))
    data = _input_data(cfg, model, args)
    dist = model.predictive(data)
    samples = dist.sample(cfg.metrics.n_samples, Rng(cfg.seed).split("sampling"))
    header = ["mean", "median", "std"]
    cols = [samples.mean(axis=1), dist.median(), samples.std(axis=1, ddof=1)]
    if data.y is not None:
        header.insert(0, "y")
        cols.insert(0, data.y_raw)
    _write_csv(out / "predictions.csv", header, cols)
    print(f"wrote {len(data)} predictions to {out / 'predictions.csv'}")
    return 0


def cmd_sample(cfg: RunConfig, args) -> int:
    out = _out(cfg, args)
    model = _load_model(cfg, _model_path(args, out))
    data = _input_data(cfg, model, args)
    samples = model.predictive(data).sample(cfg.metrics.n_samples, Rng(cfg.seed).split("sampling"))
    with open(out / "samples.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["row", "draw", "value"])
        for i, row in enumerate(samples):
            for j, v in enumerate(row):
                w.writerow([i, j, repr(float(v))])
    print(f"wrote {samples.size} draws to {out / 'samples.csv'}")
    return 0


def cmd_riskcov(cfg: RunConfig, args) -> int:
    out = _out(cfg, args)
    model = _load_model(cfg, _model_path(args, out))
    ev = evaluate(model, _test_data(cfg, model), cfg.metrics.n_samples, cfg.seed)
    aurcs = {}
    for method in methods(cfg):
        curve = risk_curve(ev, method, cfg.metrics.risk)
        curve.to_csv(out / f"riskcov_{method}.csv")
        aurcs[method] = curve.aurc
    first = methods(cfg)[0]
    doc = M.metrics_document(**{k: ev.summary[k] for k in ("nll", "rmse", "mape", "crps", "seed", "n_samples")},
                             aurc=aurcs[first], confidence_method=first, aurc_by_method=aurcs,
                             risk=cfg.metrics.risk)
    M.write_metrics(doc, out / "metrics.json")
    print(json.dumps(aurcs, sort_keys=True))
    return 0


def cmd_benchmark(cfg: RunConfig, args) -> int:
    out = _out(cfg, args)
    results = run_benchmark(cfg, out, args.splits)
    print(f"NLL {results['nll_table']}  RMSE {results['rmse_table']}  CRPS {results['crps_table']}  "
          f"({results['completed']}/{results['n_splits']} splits)")
    return 1 if results["partial"] else 0


def cmd_tune(cfg: RunConfig, args) -> int:
    out = _out(cfg, args)
    result = run_tune(cfg, out, args.budget)
    best = result["best"]
    print(f"best trial {best['trial']}: val NLL {best['val_nll']:.4f} {json.dumps(best['params'], sort_keys=True)}")
    return 0


HANDLERS = {
    "train": cmd_train, "evaluate": cmd_evaluate, "predict": cmd_predict, "sample": cmd_sample,
    "riskcov": cmd_riskcov, "benchmark": cmd_benchmark, "tune": cmd_tune,
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="tabflow", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", required=True, help="INI run configuration")
        p.add_argument("--seed", type=int, help="override [train] seed")
        p.add_argument("--out", help="override [output] dir")
        p.add_argument("--splits", type=int, help="override [data] n_splits")
        p.add_argument("-v", "--verbose", action="store_true")
        if name in ("evaluate", "predict", "sample", "riskcov"):
            p.add_argument("--model", help="model file (default <out>/model.bin)")
        if name in ("predict", "sample"):
            p.add_argument("--input", help="CSV to predict for (default: test rows of the split)")
        if name == "tune":
            p.add_argument("--budget", type=int, help="override [tune] budget")
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    overrides: dict[str, dict[str, str]] = {}
    if args.seed is not None:
        overrides.setdefault("train", {})["seed"] = str(args.seed)
    if args.splits is not None:
        overrides.setdefault("data", {})["n_splits"] = str(args.splits)
    try:
        cfg = load_config(args.config, overrides)
        return HANDLERS[args.command](cfg, args)
    except TabFlowError as err:
        print(f"error: {type(err).__name__}: {err}", file=sys.stderr)
        return 2


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
