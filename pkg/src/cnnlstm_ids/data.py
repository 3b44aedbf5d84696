"""Flow-record tables: CSV ingestion, cleaning, label binarisation,
min-max scaling, stratified splitting and a synthetic generator.

Every transform returns a new :class:`FlowTable` and appends a line to
its ``provenance["steps"]`` log.
"""

from __future__ import annotations

import copy
import csv
import json
import logging
import math
from dataclasses import dataclass, field
from decimal import ROUND_HALF_UP, Decimal
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .errors import (EmptyDatasetError, MissingColumnError, ParameterError, ParseError, SchemaError,
                     StratificationError)
from .tensor import Rng

log = logging.getLogger(__name__)

# Identifier columns (flow ids, endpoints, timestamps) as written by CICFlowMeter
# and the protocol-specific parsers shipped with the DNP3 / IEC 104 datasets.
# Matching ignores case, spaces and underscores.
_IDENTIFIERS = ["Flow ID", "Src IP", "Dst IP", "Source IP", "Destination IP", "Timestamp",
                "Date", "firstPacketDIR"]
DEFAULT_DROP = {
    "dnp3": _IDENTIFIERS,
    "iec104": _IDENTIFIERS,
    "none": [],
}

MISSING = {"", "na", "n/a", "null", "none", "?"}


def _norm(name: str) -> str:
    return "".join(name.lower().replace("_", " ").split())


@dataclass
class FlowTable:
    feature_names: list[str]
    X: np.ndarray  # (n, F) float64
    labels: np.ndarray  # raw strings until binarize_labels, then int64 0/1
    provenance: dict = field(default_factory=dict)

    def __post_init__(self):
        self.X = np.asarray(self.X, dtype=np.float64)
        if self.X.ndim != 2 or self.X.shape[1] != len(self.feature_names):
            raise SchemaError(f"feature matrix {self.X.shape} does not match {len(self.feature_names)} names")
        if len(self.labels) != len(self.X):
            raise SchemaError(f"{len(self.labels)} labels for {len(self.X)} rows")
        self.provenance.setdefault("steps", [])

    def __len__(self) -> int:
        return len(self.X)

    @property
    def n_features(self) -> int:
        return self.X.shape[1]

    def _derive(self, X, labels, names=None, step: str | None = None, **extra) -> "FlowTable":
        prov = copy.deepcopy(self.provenance)
        if step:
            prov["steps"].append(step)
        prov.update(extra)
        return FlowTable(list(self.feature_names if names is None else names), X, labels, prov)

    def subset(self, rows) -> "FlowTable":
        rows = np.asarray(rows, dtype=np.int64)
        return FlowTable(list(self.feature_names), self.X[rows], np.asarray(self.labels)[rows],
                         copy.deepcopy(self.provenance))

    def select(self, names: Sequence[str]) -> "FlowTable":
        """Reorder/restrict columns to ``names``; missing ones are a schema error."""
        index = {n: k for k, n in enumerate(self.feature_names)}
        missing = [n for n in names if n not in index]
        if missing:
            raise SchemaError(f"table lacks feature columns {missing}")
        cols = [index[n] for n in names]
        return self._derive(self.X[:, cols], self.labels, names)

    def class_counts(self) -> dict[int, int]:
        values, counts = np.unique(np.asarray(self.labels), return_counts=True)
        return {int(v): int(c) for v, c in zip(values, counts)}


# -- CSV I/O -----------------------------------------------------------------

def _to_float(cell: str) -> float:
    if cell.strip().lower() in MISSING:
        return math.nan
    return float(cell)


def load_csv(path: str | Path, label_column: str = "Label", drop_columns: Iterable[str] = (),
             require_label: bool = True) -> FlowTable:
    """Read a comma-separated flow file with a header row.

    Numeric columns are parsed as floats (empty / NA cells become NaN).
    Any other feature column is label-encoded in first-appearance order.
    Columns named in ``drop_columns`` are skipped. With
    ``require_label=False`` a file without the label column loads with
    empty-string labels (used for unlabeled prediction input).
    """
    path = Path(path)
    with open(path, newline="", encoding="utf-8-sig") as fh:
        reader = csv.reader(fh)
        header = None
        rows: list[list[str]] = []
        for record in reader:
            if not record or all(not c.strip() for c in record):
                continue
            if header is None:
                header = [h.strip() for h in record]
                continue
            if len(record) != len(header):
                raise ParseError(f"expected {len(header)} fields, found {len(record)}", reader.line_num)
            rows.append(record)
    if header is None:
        raise ParseError(f"{path}: file is empty", 1)
    if not rows:
        raise ParseError(f"{path}: header but no data rows", 2)

    label_idx = next((k for k, h in enumerate(header) if h == label_column), None)
    if label_idx is None:
        label_idx = next((k for k, h in enumerate(header) if _norm(h) == _norm(label_column)), None)
    if label_idx is None and require_label:
        raise MissingColumnError(label_column)

    drop = {_norm(c) for c in drop_columns}
    names, columns, dropped, encodings = [], [], [], {}
    for k, name in enumerate(header):
        if k == label_idx:
            continue
        if _norm(name) in drop:
            dropped.append(name)
            continue
        cells = [r[k] for r in rows]
        try:
            col = [_to_float(c) for c in cells]
        except ValueError:
            mapping: dict[str, int] = {}
            col = []
            for c in cells:
                c = c.strip()
                if c.lower() in MISSING:
                    col.append(math.nan)
                else:
                    col.append(float(mapping.setdefault(c, len(mapping))))
            encodings[name] = mapping
        names.append(name)
        columns.append(col)

    X = np.array(columns, dtype=np.float64).T if columns else np.empty((len(rows), 0))
    labels = (np.array([r[label_idx].strip() for r in rows], dtype=object) if label_idx is not None
              else np.array([""] * len(rows), dtype=object))
    prov = {"source": str(path), "label_column": label_column, "dropped_columns": dropped,
            "encodings": encodings, "steps": [f"load_csv: {len(rows)} rows, {len(names)} features"]}
    return FlowTable(names, X, labels, prov)


def _fmt(v: float) -> str:
    return repr(float(v))


def write_csv(table: FlowTable, path: str | Path, label_column: str = "Label") -> None:
    """Write rows in the input dialect; floats use shortest round-trip repr."""
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(list(table.feature_names) + [label_column])
        for row, lab in zip(table.X, table.labels):
            w.writerow([_fmt(v) for v in row] + [lab])


def write_sidecar(data: dict, path: str | Path) -> None:
    Path(path).write_text(json.dumps(data, indent=2, sort_keys=True) + "\n", encoding="utf-8")


# -- cleaning ----------------------------------------------------------------

def clean(table: FlowTable, drop_constant: bool = True) -> FlowTable:
    """Drop rows holding any NaN/inf cell, then constant feature columns."""
    finite = np.all(np.isfinite(table.X), axis=1)
    X = table.X[finite]
    labels = np.asarray(table.labels)[finite]
    n_bad = int(np.sum(~finite))
    if len(X) == 0:
        raise EmptyDatasetError("cleaning removed every row")
    keep = np.ones(X.shape[1], dtype=bool)
    if drop_constant:
        keep = np.ptp(X, axis=0) > 0 if X.shape[1] else keep
    const = [n for n, k in zip(table.feature_names, keep) if not k]
    if not np.any(keep):
        raise EmptyDatasetError("every feature column is constant")
    names = [n for n, k in zip(table.feature_names, keep) if k]
    prov_const = sorted(set(table.provenance.get("constant_columns", [])) | set(const))
    return table._derive(X[:, keep], labels, names,
                         f"clean: dropped {n_bad} non-finite rows, {len(const)} constant columns",
                         constant_columns=prov_const,
                         dropped_rows=table.provenance.get("dropped_rows", 0) + n_bad)


def _is_binary(labels: np.ndarray) -> bool:
    try:
        vals = {int(v) if float(v) == int(float(v)) else None for v in labels}
    except (TypeError, ValueError):
        return False
    return vals <= {0, 1}


def binarize_labels(table: FlowTable, normal_label: str = "NORMAL") -> FlowTable:
    """``normal_label`` (case-insensitive) becomes 0, every other label 1.

    Tables whose labels are already all 0/1 are returned with int labels
    and otherwise unchanged.
    """
    raw = np.asarray(table.labels)
    if _is_binary(raw):
        return table._derive(table.X, np.array([int(float(v)) for v in raw], dtype=np.int64))
    target = normal_label.strip().lower()
    y = np.array([0 if str(v).strip().lower() == target else 1 for v in raw], dtype=np.int64)
    warnings = list(table.provenance.get("warnings", []))
    if not np.any(y == 0):
        msg = f"no row carries the normal label {normal_label!r}; every row is an attack"
        log.warning(msg)
        warnings.append(msg)
    return table._derive(table.X, y, None, f"binarize_labels: normal={normal_label!r}",
                         normal_label=normal_label, warnings=warnings)


# -- min-max scaling ---------------------------------------------------------

@dataclass
class NormalizationSpec:
    feature_names: list[str]
    mins: np.ndarray
    maxs: np.ndarray
    fit_scope: str = "train_only"

    def to_dict(self) -> dict:
        return {"feature_names": list(self.feature_names), "mins": [float(v) for v in self.mins],
                "maxs": [float(v) for v in self.maxs], "fit_scope": self.fit_scope}

    @classmethod
    def from_dict(cls, d: dict) -> "NormalizationSpec":
        return cls(list(d["feature_names"]), np.array(d["mins"], dtype=np.float64),
                   np.array(d["maxs"], dtype=np.float64), d.get("fit_scope", "train_only"))


def minmax_fit(table: FlowTable, scope: str = "train_only") -> NormalizationSpec:
    if scope not in ("train_only", "whole_dataset"):
        raise ParameterError(f"unknown fit scope {scope!r}")
    if len(table) == 0:
        raise EmptyDatasetError("cannot fit normalization on an empty table")
    return NormalizationSpec(list(table.feature_names), table.X.min(axis=0), table.X.max(axis=0), scope)


def minmax_apply(spec: NormalizationSpec, table: FlowTable) -> FlowTable:
    """``(x - min) / (max - min)``; zero-range features map to 0. Not clamped."""
    if list(table.feature_names) != list(spec.feature_names):
        raise SchemaError("table features do not match the normalization spec")
    span = spec.maxs - spec.mins
    safe = np.where(span > 0, span, 1.0)
    X = np.where(span > 0, (table.X - spec.mins) / safe, 0.0)
    return table._derive(X, table.labels, None, f"minmax_apply: fit_scope={spec.fit_scope}")


# -- splitting ----------------------------------------------------------------

@dataclass
class SplitPlan:
    train: np.ndarray
    test: np.ndarray
    ratio: float
    seed: int


@dataclass
class FoldPlan:
    folds: list[np.ndarray]
    seed: int

    @property
    def k(self) -> int:
        return len(self.folds)

    def train_indices(self, fold: int) -> np.ndarray:
        return np.sort(np.concatenate([f for j, f in enumerate(self.folds) if j != fold]))


def round_half_up(x: Decimal) -> int:
    return int(x.quantize(Decimal(1), rounding=ROUND_HALF_UP))


def _class_rows(table: FlowTable) -> dict[int, np.ndarray]:
    """Row indices per class in a content-defined order, so that splits depend
    on the multiset of rows and not on how the file happened to be ordered."""
    labels = np.asarray(table.labels).astype(np.int64)
    keys = [table.X[:, j] for j in range(table.n_features - 1, -1, -1)]
    canon = np.lexsort(keys) if keys else np.arange(len(table))
    return {int(c): canon[labels[canon] == c] for c in np.unique(labels)}


def stratified_split(table: FlowTable, ratio: float = 0.7, seed: int = 42) -> SplitPlan:
    """Per class, ``round_half_up(n_c * ratio)`` seeded-random rows go to train.

    The count is kept within ``[1, n_c - 1]`` so neither side loses a class.
    """
    if not 0.0 < ratio < 1.0:
        raise ParameterError(f"split ratio must be in (0, 1), got {ratio}")
    rng = Rng(seed)
    train, test = [], []
    for cls, rows in _class_rows(table).items():
        n = len(rows)
        if n < 2:
            raise StratificationError(f"class {cls} has {n} row(s); stratified splitting needs at least 2")
        n_train = min(max(round_half_up(Decimal(n) * Decimal(repr(ratio))), 1), n - 1)
        shuffled = rows[rng.split(cls).permutation(n)]
        train.append(shuffled[:n_train])
        test.append(shuffled[n_train:])
    return SplitPlan(np.sort(np.concatenate(train)), np.sort(np.concatenate(test)), ratio, seed)


def stratified_kfold(table: FlowTable, k: int = 5, seed: int = 42) -> FoldPlan:
    """Seeded shuffle within each class, then one round-robin deal over all
    classes in label order (the deal continues where the previous class
    stopped), so both fold sizes and per-class fold counts differ by at most 1.

    A class with fewer than ``k`` rows is allowed (some folds get none of it)
    but logged; fewer than ``k`` rows in total is an error.
    """
    if k < 2:
        raise ParameterError(f"k must be >= 2, got {k}")
    if len(table) < k:
        raise StratificationError(f"{len(table)} rows cannot fill {k} folds")
    rng = Rng(seed)
    folds: list[list[int]] = [[] for _ in range(k)]
    pos = 0
    for cls, rows in _class_rows(table).items():
        if len(rows) < k:
            log.warning("class %d has %d rows, fewer than %d folds", cls, len(rows), k)
        for r in rows[rng.split(cls).permutation(len(rows))]:
            folds[pos % k].append(int(r))
            pos += 1
    return FoldPlan([np.sort(np.array(f, dtype=np.int64)) for f in folds], seed)


# -- synthetic data ------------------------------------------------------------

def generate_synthetic(n_normal: int = 666, n_attack: int = 6660, n_features: int = 60,
                       separation: float = 2.0, seed: int = 42) -> FlowTable:
    """Two-class flow-like table with a controllable class gap.

    Feature ``j`` of a normal row is ``base_j + scale_j * u`` with
    ``u ~ U[0, 1)``. Attack rows are drawn the same way, except that on a
    seeded subset of ``ceil(F/4)`` features ``u`` is replaced by
    ``u + separation``. For ``separation >= 1`` the classes occupy disjoint
    ranges on those features (so they are linearly separable before and
    after min-max scaling); ``separation = 0`` makes them identically
    distributed. Rows are shuffled.
    """
    if n_features < 8:
        raise ParameterError(f"n_features must be >= 8, got {n_features}")
    if n_normal < 1 or n_attack < 1:
        raise ParameterError("class counts must be >= 1")
    rng = Rng(seed)
    scale = 10.0 ** (3.0 * rng.random(n_features))  # magnitudes from 1 to 1000, like flow stats
    base = scale * 5.0 * rng.random(n_features)
    shifted = np.sort(rng.permutation(n_features)[:math.ceil(n_features / 4)])
    n = n_normal + n_attack
    u = rng.random((n, n_features))
    y = np.r_[np.zeros(n_normal, dtype=np.int64), np.ones(n_attack, dtype=np.int64)]
    u[n_normal:, shifted] += separation
    X = base + scale * u
    order = rng.permutation(n)
    names = [f"f{j:02d}" for j in range(n_features)]
    prov = {"source": "synthetic", "synthetic": {"n_normal": n_normal, "n_attack": n_attack,
                                                 "n_features": n_features, "separation": separation,
                                                 "seed": seed, "shifted_features": shifted.tolist()},
            "steps": ["generate_synthetic"]}
    return FlowTable(names, X[order], y[order], prov)
