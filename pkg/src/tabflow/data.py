"""CSV ingestion, preprocessing and train/validation/test splitting."""
from __future__ import annotations

import csv
import datetime as dt
import hashlib
import math
import os
from dataclasses import dataclass, field

import numpy as np

from .encoder import CATEGORICAL, NUMERIC, Feature, FeatureSchema
from .errors import StructuralError
from .rng import Rng

KINDS = ("numeric", "categorical", "date", "target", "ignore")
MISSING = frozenset({"", "NA", "N/A", "NaN", "nan", "null", "NULL", "None", "?"})
MISSING_NUMERIC = -1.0
MISSING_CATEGORY = "empty"


@dataclass(frozen=True)
class SchemaDeclaration:
    """Column kinds as declared by the user, in file order."""

    columns: tuple[tuple[str, str], ...]

    def __post_init__(self):
        names = [n for n, _ in self.columns]
        if len(set(names)) != len(names):
            raise StructuralError(f"duplicate columns in schema: {names}")
        for name, kind in self.columns:
            if kind not in KINDS:
                raise StructuralError(f"column {name!r}: unknown kind {kind!r} (expected one of {KINDS})")
        targets = [n for n, k in self.columns if k == "target"]
        if len(targets) != 1:
            raise StructuralError(f"schema must declare exactly one target column, found {targets}")
        if not self.features:
            raise StructuralError("schema declares no feature columns")

    @property
    def target(self) -> str:
        return next(n for n, k in self.columns if k == "target")

    @property
    def features(self) -> list[tuple[str, str]]:
        """Feature columns; date columns enter the model as categoricals."""
        out = []
        for name, kind in self.columns:
            if kind == "numeric":
                out.append((name, NUMERIC))
            elif kind in ("categorical", "date"):
                out.append((name, CATEGORICAL))
        return out

    def kind(self, name: str) -> str:
        return dict(self.columns)[name]

    @classmethod
    def parse(cls, text: str) -> "SchemaDeclaration":
        cols = []
        for lineno, line in enumerate(text.splitlines(), 1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            if ":" not in line:
                raise StructuralError(f"schema line {lineno}: expected 'name: kind', got {line!r}")
            name, kind = (s.strip() for s in line.rsplit(":", 1))
            cols.append((name, kind.lower()))
        return cls(tuple(cols))

    @classmethod
    def load(cls, path) -> "SchemaDeclaration":
        try:
            with open(path, encoding="utf-8") as fh:
                return cls.parse(fh.read())
        except OSError as err:
            raise StructuralError(f"cannot read schema file {os.fspath(path)!r}: {err.strerror}") from err


@dataclass
class RawTable:
    """Rectangular table of string cells."""

    columns: tuple[str, ...]
    rows: list[tuple[str, ...]]
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        if len(set(self.columns)) != len(self.columns):
            raise StructuralError(f"duplicate header names: {self.columns}")

    def __len__(self) -> int:
        return len(self.rows)

    @property
    def n_rows(self) -> int:
        return len(self.rows)

    def column(self, name: str) -> list[str]:
        try:
            j = self.columns.index(name)
        except ValueError:
            raise StructuralError(f"table has no column {name!r}") from None
        return [r[j] for r in self.rows]

    def subset(self, indices, **meta) -> "RawTable":
        return RawTable(self.columns, [self.rows[i] for i in indices], {**self.meta, **meta})


def load_csv(path, declaration: SchemaDeclaration, require_target: bool = True) -> RawTable:
    """Read a UTF-8 CSV with a header row; every declared column must be present.

    Prediction inputs may omit the target with ``require_target=False``.
    """
    try:
        with open(path, newline="", encoding="utf-8") as fh:
            reader = csv.reader(fh)
            try:
                header = tuple(h.strip() for h in next(reader))
            except StopIteration:
                raise StructuralError(f"{os.fspath(path)!r} is empty (no header row)") from None
            rows = []
            for lineno, row in enumerate(reader, 2):
                if not row:
                    continue
                if len(row) != len(header):
                    raise StructuralError(f"{os.fspath(path)!r} line {lineno}: {len(row)} cells, "
                                          f"header has {len(header)}")
                rows.append(tuple(c.strip() for c in row))
    except OSError as err:
        raise StructuralError(f"cannot read {os.fspath(path)!r}: {err.strerror}") from err
    except UnicodeDecodeError as err:
        raise StructuralError(f"{os.fspath(path)!r} is not valid UTF-8") from err
    for name, kind in declaration.columns:
        if kind == "ignore" or (kind == "target" and not require_target):
            continue
        if name not in header:
            raise StructuralError(f"declared column {name!r} missing from {os.fspath(path)!r}")
    return RawTable(header, rows, {"source": os.fspath(path)})


def _parse_float(cell: str, column: str, row: int) -> float:
    if cell in MISSING:
        return MISSING_NUMERIC
    try:
        v = float(cell)
    except ValueError:
        raise StructuralError(f"column {column!r} row {row}: cannot parse {cell!r} as a number") from None
    if not math.isfinite(v):
        raise StructuralError(f"column {column!r} row {row}: non-finite value {cell!r}")
    return v


def _parse_target(cells: list[str], column: str) -> np.ndarray:
    out = np.empty(len(cells))
    for i, c in enumerate(cells):
        if c in MISSING:
            raise StructuralError(f"target {column!r} row {i}: missing value")
        out[i] = _parse_float(c, column, i)
    return out


def _fingerprint(table: RawTable) -> str:
    h = hashlib.sha256()
    h.update("\x1f".join(table.columns).encode())
    for row in table.rows:
        h.update(b"\x1e")
        h.update("\x1f".join(row).encode())
    return h.hexdigest()[:16]


@dataclass(frozen=True)
class Preprocessor:
    """Statistics fitted on training rows only."""

    declaration: SchemaDeclaration
    numeric_stats: dict[str, tuple[float, float]]
    categories: dict[str, tuple[str, ...]]
    target_mean: float
    target_std: float
    fingerprint: str

    @property
    def schema(self) -> FeatureSchema:
        feats = []
        for name, kind in self.declaration.features:
            feats.append(Feature(name, kind, self.categories.get(name, ())))
        return FeatureSchema(tuple(feats))

    def to_dict(self) -> dict:
        return {
            "declaration": [list(c) for c in self.declaration.columns],
            "numeric_stats": {k: list(v) for k, v in self.numeric_stats.items()},
            "categories": {k: list(v) for k, v in self.categories.items()},
            "target_mean": self.target_mean,
            "target_std": self.target_std,
            "fingerprint": self.fingerprint,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "Preprocessor":
        return cls(SchemaDeclaration(tuple(tuple(c) for c in d["declaration"])),
                   {k: tuple(v) for k, v in d["numeric_stats"].items()},
                   {k: tuple(v) for k, v in d["categories"].items()},
                   float(d["target_mean"]), float(d["target_std"]), d["fingerprint"])


def fit_preprocessor(train: RawTable, declaration: SchemaDeclaration) -> Preprocessor:
    """Z-score statistics (population std) and category maps from the training rows."""
    if len(train) < 2:
        raise StructuralError(f"need at least 2 training rows to fit, got {len(train)}")
    stats, cats = {}, {}
    for name, kind in declaration.features:
        cells = train.column(name)
        if kind == NUMERIC:
            vals = np.array([_parse_float(c, name, i) for i, c in enumerate(cells)])
            std = float(vals.std())
            if std < 1e-12:
                raise StructuralError(f"numeric column {name!r} is constant on the training rows")
            stats[name] = (float(vals.mean()), std)
        else:
            seen = {MISSING_CATEGORY if c in MISSING else c for c in cells}
            cats[name] = tuple(sorted(seen))
    y = _parse_target(train.column(declaration.target), declaration.target)
    y_std = float(y.std())
    if y_std < 1e-12:
        raise StructuralError("target is constant on the training rows")
    return Preprocessor(declaration, stats, cats, float(y.mean()), y_std, _fingerprint(train))


@dataclass
class TabularDataset:
    """Encoded features and standardised target, ready for the model."""

    x_num: np.ndarray
    x_cat: np.ndarray
    y: np.ndarray | None
    schema: FeatureSchema
    preprocessor: Preprocessor
    provenance: dict = field(default_factory=dict)

    def __post_init__(self):
        n = len(self)
        if self.x_cat.shape[0] != n or (self.y is not None and self.y.shape != (n,)):
            raise StructuralError("feature matrices and target disagree on the row count")
        for j, f in enumerate(self.schema.categorical):
            col = self.x_cat[:, j]
            if col.size and (col.min() < 0 or col.max() > f.cardinality):
                raise StructuralError(f"category index out of range for {f.name!r}")

    def __len__(self) -> int:
        return self.x_num.shape[0]

    @property
    def y_raw(self) -> np.ndarray:
        """Target in original units."""
        if self.y is None:
            raise StructuralError("dataset has no target column")
        return self.y * self.preprocessor.target_std + self.preprocessor.target_mean

    def subset(self, indices) -> "TabularDataset":
        indices = np.asarray(indices, dtype=np.int64)
        return TabularDataset(self.x_num[indices], self.x_cat[indices],
                              None if self.y is None else self.y[indices], self.schema,
                              self.preprocessor, dict(self.provenance))


def transform(table: RawTable, pre: Preprocessor) -> TabularDataset:
    """Apply fitted statistics; unseen categories go to the reserved index."""
    if isinstance(table, TabularDataset):
        raise StructuralError("table is already transformed (preprocessor "
                              f"{table.provenance.get('preprocessor')}); refusing to standardise twice")
    schema = pre.schema
    n = len(table)
    x_num = np.empty((n, len(schema.numeric)))
    x_cat = np.empty((n, len(schema.categorical)), dtype=np.int64)
    unknown = 0
    for j, f in enumerate(schema.numeric):
        mean, std = pre.numeric_stats[f.name]
        cells = table.column(f.name)
        x_num[:, j] = [(_parse_float(c, f.name, i) - mean) / std for i, c in enumerate(cells)]
    for j, f in enumerate(schema.categorical):
        index = {c: i for i, c in enumerate(f.categories)}
        for i, c in enumerate(table.column(f.name)):
            key = MISSING_CATEGORY if c in MISSING else c
            k = index.get(key)
            if k is None:
                unknown += 1
                k = f.unknown_index
            x_cat[i, j] = k
    target = pre.declaration.target
    y = None
    if target in table.columns:
        y = (_parse_target(table.column(target), target) - pre.target_mean) / pre.target_std
    provenance = {
        "source": table.meta.get("source"),
        "split": table.meta.get("split"),
        "preprocessor": pre.fingerprint,
        "unknown_categories": unknown,
    }
    if "dropped" in table.meta:
        provenance["dropped"] = table.meta["dropped"]
    return TabularDataset(x_num, x_cat, y, schema, pre, provenance)


def cv_splits(n_rows: int, n_splits: int, test_fraction: float = 0.1, val_fraction: float = 0.1,
              seed: int = 0) -> list[tuple[np.ndarray, np.ndarray, np.ndarray]]:
    """Repeated random holdout: split ``i`` shuffles with stream ``(seed, i)``."""
    if n_rows < 10:
        raise StructuralError(f"need at least 10 rows to split, got {n_rows}")
    if not (0 < test_fraction < 1 and 0 < val_fraction < 1):
        raise StructuralError("split fractions must lie in (0, 1)")
    out = []
    for i in range(n_splits):
        perm = Rng(seed, i).permutation(n_rows)
        n_test = math.ceil(test_fraction * n_rows)
        rest = n_rows - n_test
        n_val = math.ceil(val_fraction * rest)
        train, val, test = perm[: rest - n_val], perm[rest - n_val: rest], perm[rest:]
        if not (len(train) and len(val) and len(test)):
            raise StructuralError(f"split {i} has an empty part ({len(train)}, {len(val)}, {len(test)})")
        out.append((np.sort(train), np.sort(val), np.sort(test)))
    return out


def parse_date(text: str) -> dt.date:
    try:
        return dt.date.fromisoformat(text.strip())
    except ValueError:
        raise StructuralError(f"cannot parse {text!r} as a YYYY-MM-DD date") from None


def chrono_split(table: RawTable, date_column: str, train_end, val_end,
                 test_end) -> tuple[RawTable, RawTable, RawTable]:
    """Bucket rows by date: ``<= train_end``, ``(train_end, val_end]``, ``(val_end, test_end]``.

    Rows after ``test_end`` are dropped; the count is stored in each part's ``meta``.
    """
    cuts = [d if isinstance(d, dt.date) else parse_date(d) for d in (train_end, val_end, test_end)]
    if not (cuts[0] < cuts[1] <= cuts[2]):
        raise StructuralError("need train_end < val_end <= test_end")
    parts: list[list[int]] = [[], [], []]
    dropped = 0
    for i, cell in enumerate(table.column(date_column)):
        try:
            day = parse_date(cell)
        except StructuralError:
            raise StructuralError(f"row {i}: cannot parse date {cell!r} in {date_column!r}") from None
        if day <= cuts[0]:
            parts[0].append(i)
        elif day <= cuts[1]:
            parts[1].append(i)
        elif day <= cuts[2]:
            parts[2].append(i)
        else:
            dropped += 1
    names = ("train", "val", "test")
    return tuple(table.subset(idx, split=f"chrono:{n}", dropped=dropped)
                 for n, idx in zip(names, parts))


def table_from_columns(columns: dict, source: str = "memory") -> RawTable:
    """Build a RawTable from equal-length sequences (numbers are written with ``repr``)."""
    names = tuple(columns)
    cols = [[c if isinstance(c, str) else repr(float(c)) for c in columns[n]] for n in names]
    lengths = {len(c) for c in cols}
    if len(lengths) > 1:
        raise StructuralError(f"columns have different lengths: {sorted(lengths)}")
    return RawTable(names, list(zip(*cols)), {"source": source})
