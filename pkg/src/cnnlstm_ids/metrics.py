"""Confusion matrix and the four headline metrics.

The positive class is 1 (attack), so recall is the detection rate.
Metrics are percentages. A zero denominator yields 0 for the affected
metric and records its name in ``MetricSet.degenerate``.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field

import numpy as np

from .errors import DataError


class MetricInputError(DataError):
    pass


@dataclass(frozen=True)
class ConfusionMatrix:
    tp: int
    tn: int
    fp: int
    fn: int

    @property
    def total(self) -> int:
        return self.tp + self.tn + self.fp + self.fn

    def to_dict(self) -> dict[str, int]:
        return asdict(self)


@dataclass
class MetricSet:
    accuracy: float
    precision: float
    recall: float
    f1: float
    loss: float | None = None
    degenerate: list[str] = field(default_factory=list)

    def to_dict(self, digits: int | None = 4) -> dict:
        d = {k: (round(v, digits) if digits is not None and isinstance(v, float) else v)
             for k, v in asdict(self).items()}
        return d


def _binary(a, name: str) -> np.ndarray:
    arr = np.asarray(a)
    if arr.ndim != 1:
        raise MetricInputError(f"{name} must be a 1-D label vector")
    if arr.size and not np.all((arr == 0) | (arr == 1)):
        raise MetricInputError(f"{name} contains values other than 0 and 1")
    return arr.astype(np.int64)


def confusion(pred, truth) -> ConfusionMatrix:
    p = _binary(pred, "pred")
    t = _binary(truth, "truth")
    if p.shape != t.shape:
        raise MetricInputError(f"pred has {p.size} labels, truth has {t.size}")
    return ConfusionMatrix(tp=int(np.sum((p == 1) & (t == 1))), tn=int(np.sum((p == 0) & (t == 0))),
                           fp=int(np.sum((p == 1) & (t == 0))), fn=int(np.sum((p == 0) & (t == 1))))


def metrics(cm: ConfusionMatrix, loss: float | None = None) -> MetricSet:
    """Percentages: ratio times 100, and F1 as the harmonic mean of the two percentages."""
    if cm.total <= 0:
        raise MetricInputError("confusion matrix is empty")
    degenerate = []
    accuracy = (cm.tp + cm.tn) / cm.total * 100.0
    if cm.tp + cm.fp:
        precision = cm.tp / (cm.tp + cm.fp) * 100.0
    else:
        precision = 0.0
        degenerate.append("precision")
    if cm.tp + cm.fn:
        recall = cm.tp / (cm.tp + cm.fn) * 100.0
    else:
        recall = 0.0
        degenerate.append("recall")
    if precision + recall > 0:
        f1 = f1_from(precision, recall)
    else:
        f1 = 0.0
        degenerate.append("f1")
    return MetricSet(accuracy, precision, recall, f1, loss, degenerate)


def f1_from(precision: float, recall: float) -> float:
    """Harmonic mean of two percentages (0 when both are 0)."""
    return 0.0 if precision + recall == 0 else 2.0 * (precision * recall) / (precision + recall)
