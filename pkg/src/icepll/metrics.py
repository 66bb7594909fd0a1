"""Confusion matrices and support-weighted precision / recall / F1.

Rows of a confusion matrix are true classes, columns are predictions.
Any ratio with a zero denominator is reported as 0.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, asdict
from pathlib import Path

import numpy as np

from .labels import CLASS_ABBREV, N_CLASSES


class MetricsError(ValueError):
    pass


class LengthMismatch(MetricsError):
    pass


class IndexOutOfRange(MetricsError):
    pass


class EmptyMatrix(MetricsError):
    pass


def confusion(preds, truths, n_classes: int = N_CLASSES) -> np.ndarray:
    preds = np.asarray(preds, dtype=np.int64).ravel()
    truths = np.asarray(truths, dtype=np.int64).ravel()
    if preds.shape != truths.shape:
        raise LengthMismatch(f"{preds.size} predictions vs {truths.size} truths")
    for arr in (preds, truths):
        if arr.size and (arr.min() < 0 or arr.max() >= n_classes):
            raise IndexOutOfRange(f"class index outside [0, {n_classes})")
    cm = np.zeros((n_classes, n_classes), dtype=np.int64)
    np.add.at(cm, (truths, preds), 1)
    return cm


def _safe_div(num, den):
    num = np.asarray(num, dtype=np.float64)
    den = np.asarray(den, dtype=np.float64)
    out = np.zeros_like(num)
    np.divide(num, den, out=out, where=den > 0)
    return out


@dataclass
class MetricsReport:
    accuracy: float
    weighted_precision: float
    weighted_recall: float
    weighted_f1: float
    per_class_precision: list
    per_class_recall: list
    per_class_f1: list
    support: list
    confusion: list

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "MetricsReport":
        return cls(**d)

    def to_json(self, path=None, **kw) -> str:
        text = json.dumps(self.to_dict(), indent=2, **kw)
        if path is not None:
            Path(path).write_text(text)
        return text

    def table(self, names=CLASS_ABBREV) -> str:
        """Aligned text rendering: per-class rows, then the weighted summary."""
        lines = ["rows=true class, columns=predicted",
                 f"{'class':>6} {'prec':>7} {'recall':>7} {'f1':>7} {'support':>8}"]
        for i, name in enumerate(names[:len(self.support)]):
            lines.append(f"{name:>6} {self.per_class_precision[i]:7.4f} {self.per_class_recall[i]:7.4f} "
                         f"{self.per_class_f1[i]:7.4f} {self.support[i]:8d}")
        lines.append(f"{'wavg':>6} {self.weighted_precision:7.4f} {self.weighted_recall:7.4f} "
                     f"{self.weighted_f1:7.4f} {sum(self.support):8d}")
        lines.append(f"accuracy {self.accuracy:.4f}")
        return "\n".join(lines)


def compute_metrics(cm) -> MetricsReport:
    cm = np.asarray(cm, dtype=np.int64)
    n = int(cm.sum())
    if n <= 0:
        raise EmptyMatrix("confusion matrix has no samples")
    tp = np.diag(cm)
    support = cm.sum(axis=1)
    predicted = cm.sum(axis=0)
    fp = predicted - tp
    fn = support - tp
    precision = _safe_div(tp, tp + fp)
    recall = _safe_div(tp, tp + fn)
    f1 = _safe_div(2 * tp, 2 * tp + fp + fn)
    share = support / n
    return MetricsReport(
        accuracy=float(tp.sum() / n),
        weighted_precision=float(np.sum(share * precision)),
        weighted_recall=float(np.sum(share * recall)),
        weighted_f1=float(np.sum(share * f1)),
        per_class_precision=precision.tolist(),
        per_class_recall=recall.tolist(),
        per_class_f1=f1.tolist(),
        support=[int(s) for s in support],
        confusion=cm.tolist(),
    )


def evaluate(preds, truths, n_classes: int = N_CLASSES) -> MetricsReport:
    return compute_metrics(confusion(preds, truths, n_classes))


def write_confusion_csv(path, cm, names=CLASS_ABBREV) -> None:
    cm = np.asarray(cm)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["true\\pred", *names[:cm.shape[1]]])
        for name, row in zip(names, cm):
            w.writerow([name, *[int(v) for v in row]])


def mean_reports(reports) -> MetricsReport:
    """Field-wise arithmetic mean; confusion matrices are summed."""
    reports = list(reports)
    if not reports:
        raise MetricsError("no reports to average")

    def avg(key):
        return float(np.mean([getattr(r, key) for r in reports]))

    def avg_vec(key):
        return np.mean([getattr(r, key) for r in reports], axis=0).tolist()

    return MetricsReport(
        accuracy=avg("accuracy"),
        weighted_precision=avg("weighted_precision"),
        weighted_recall=avg("weighted_recall"),
        weighted_f1=avg("weighted_f1"),
        per_class_precision=avg_vec("per_class_precision"),
        per_class_recall=avg_vec("per_class_recall"),
        per_class_f1=avg_vec("per_class_f1"),
        support=[int(x) for x in np.sum([r.support for r in reports], axis=0)],
        confusion=np.sum([r.confusion for r in reports], axis=0).tolist(),
    )
