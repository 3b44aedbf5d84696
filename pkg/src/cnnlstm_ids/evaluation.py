"""Held-out evaluation, stratified k-fold cross-validation and JSON reports."""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .data import FlowTable, minmax_apply, minmax_fit, stratified_kfold
from .errors import SchemaError, StratificationError
from .metrics import ConfusionMatrix, MetricSet, confusion, metrics
from .model import ArchitectureConfig, HybridModel, build_model, predict_proba
from .optim import TrainConfig, bce_loss, train

log = logging.getLogger(__name__)

METRIC_KEYS = ("accuracy", "precision", "recall", "f1", "loss")


def evaluate(model: HybridModel, table: FlowTable, threshold: float = 0.5) -> tuple[ConfusionMatrix, MetricSet]:
    """Inference-mode scores for every row of an already-normalised table."""
    if table.n_features != model.config.input_features:
        raise SchemaError(f"table has {table.n_features} features, model expects {model.config.input_features}")
    y = np.asarray(table.labels, dtype=np.int64)
    p = predict_proba(model, table.X)
    loss, _ = bce_loss(p, y)
    cm = confusion((p >= threshold).astype(np.int64), y)
    return cm, metrics(cm, loss)


@dataclass
class FoldResult:
    fold: int
    held_out: np.ndarray
    confusion: ConfusionMatrix
    metrics: MetricSet
    best_epoch: int
    stopped_epoch: int

    def to_dict(self) -> dict:
        return {"fold": self.fold, "n_held_out": int(len(self.held_out)),
                "confusion": self.confusion.to_dict(), "metrics": self.metrics.to_dict(),
                "best_epoch": self.best_epoch, "stopped_epoch": self.stopped_epoch}


@dataclass
class CvResult:
    folds: list[FoldResult]
    seed: int
    means: dict[str, float] = field(default_factory=dict)

    @property
    def k(self) -> int:
        return len(self.folds)


def fold_means(folds: list[FoldResult]) -> dict[str, float]:
    return {key: float(np.mean([getattr(f.metrics, key) for f in folds])) for key in METRIC_KEYS}


def crossval(table: FlowTable, arch: ArchitectureConfig, cfg: TrainConfig, k: int = 5,
             seed: int = 42, threshold: float = 0.5) -> CvResult:
    """Stratified k-fold CV on a cleaned, binarised (not yet normalised) table.

    Fold ``i`` refits min-max scaling on the other folds, trains a fresh
    model seeded with ``seed + i`` and scores the held-out fold. Folds are
    independent, so running them in any order gives the same result.
    """
    for cls, n in table.class_counts().items():
        if n < k:
            raise StratificationError(f"class {cls} has {n} rows, fewer than {k} folds")
    if len(table.class_counts()) < 2:
        raise StratificationError("cross-validation needs both classes")
    plan = stratified_kfold(table, k, seed)
    arch = replace(arch, input_features=table.n_features)
    results = []
    for i, held in enumerate(plan.folds):
        fold_seed = seed + i
        spec = minmax_fit(table.subset(plan.train_indices(i)))
        fit = minmax_apply(spec, table.subset(plan.train_indices(i)))
        test = minmax_apply(spec, table.subset(held))
        model = build_model(arch, fold_seed)
        run = train(model, fit, replace(cfg, shuffle_seed=fold_seed), monitor_table=test)
        cm, ms = evaluate(model, test, threshold)
        log.info("fold %d/%d: accuracy=%.2f%% f1=%.2f%%", i + 1, k, ms.accuracy, ms.f1)
        results.append(FoldResult(i, held, cm, ms, run.best_epoch, run.stopped_epoch))
    return CvResult(results, seed, fold_means(results))


# -- reports -----------------------------------------------------------------

def cv_section(cv: CvResult) -> dict:
    return {"k": cv.k, "seed": cv.seed, "folds": [f.to_dict() for f in cv.folds],
            "means": {k: round(v, 4) for k, v in cv.means.items()}}


def write_report(report: dict, path: str | Path) -> None:
    """Write ``report`` as UTF-8 JSON (two-space indent, keys in insertion order)."""
    text = json.dumps(report, indent=2, ensure_ascii=False, default=_jsonable)
    Path(path).write_text(text + "\n", encoding="utf-8")


def _jsonable(obj):
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    if isinstance(obj, np.generic):
        return obj.item()
    if isinstance(obj, (MetricSet, ConfusionMatrix)):
        return obj.to_dict()
    if isinstance(obj, CvResult):
        return cv_section(obj)
    raise TypeError(f"cannot serialise {type(obj).__name__}")
