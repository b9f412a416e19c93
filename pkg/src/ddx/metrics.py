"""Confusion matrices, one-vs-rest rates and precision-recall curve data."""
from __future__ import annotations

import csv
import json
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from .errors import DataError

DEFINITIONS = {
    "accuracy": "trace / total",
    "fpr": "FP / (FP + TN), one-vs-rest, 0/0 -> 0",
    "fnr": "FN / (FN + TP), one-vs-rest, 0/0 -> 0",
    "precision": "TP / (TP + FP), 0/0 -> 0",
    "recall": "TP / (TP + FN), 0/0 -> 0",
}


@dataclass(frozen=True, eq=False)
class ConfusionMatrix:
    """Rows are true classes, columns predicted classes."""

    counts: np.ndarray
    class_names: tuple

    def __post_init__(self):
        c = np.asarray(self.counts, dtype=np.int64)
        if c.ndim != 2 or c.shape[0] != c.shape[1] or (c < 0).any():
            raise DataError("confusion matrix must be square with non-negative counts")
        if len(self.class_names) != c.shape[0]:
            raise DataError("class_names length must match the matrix size")
        object.__setattr__(self, "counts", c)
        object.__setattr__(self, "class_names", tuple(self.class_names))

    @property
    def n_classes(self) -> int:
        return self.counts.shape[0]

    @property
    def total(self) -> int:
        return int(self.counts.sum())

    def accuracy(self) -> float:
        return accuracy(self)

    def to_list(self) -> list:
        return self.counts.tolist()


@dataclass(frozen=True)
class ClassRates:
    name: str
    tp: int
    fp: int
    fn: int
    tn: int
    fpr: float
    fnr: float
    precision: float
    recall: float

    @property
    def support(self) -> int:
        return self.tp + self.fn


def _ratio(a: int, b: int) -> float:
    return a / b if b else 0.0


def confusion_matrix(y_true, y_pred, n_classes: int, class_names: Optional[Sequence[str]] = None) -> ConfusionMatrix:
    y_true = np.asarray(y_true)
    y_pred = np.asarray(y_pred)
    if y_true.shape != y_pred.shape or y_true.ndim != 1:
        raise DataError(f"y_true and y_pred must be 1-d of equal length, got {y_true.shape} and {y_pred.shape}")
    for name, arr in (("y_true", y_true), ("y_pred", y_pred)):
        if arr.size and (arr.min() < 0 or arr.max() >= n_classes):
            raise DataError(f"{name} has class ids outside [0, {n_classes})")
    counts = np.zeros((n_classes, n_classes), dtype=np.int64)
    np.add.at(counts, (y_true.astype(np.intp), y_pred.astype(np.intp)), 1)
    names = tuple(class_names) if class_names is not None else tuple(str(i) for i in range(n_classes))
    return ConfusionMatrix(counts, names)


def accuracy(cm: ConfusionMatrix) -> float:
    return _ratio(int(np.trace(cm.counts)), cm.total)


def class_rates(cm: ConfusionMatrix) -> list:
    """One-vs-rest reduction for every class."""
    c = cm.counts
    total = cm.total
    rates = []
    for k, name in enumerate(cm.class_names):
        tp = int(c[k, k])
        fn = int(c[k].sum()) - tp
        fp = int(c[:, k].sum()) - tp
        tn = total - tp - fn - fp
        rates.append(ClassRates(
            name=name, tp=tp, fp=fp, fn=fn, tn=tn,
            fpr=_ratio(fp, fp + tn), fnr=_ratio(fn, fn + tp),
            precision=_ratio(tp, tp + fp), recall=_ratio(tp, tp + fn),
        ))
    return rates


@dataclass(frozen=True)
class PrCurve:
    """Points as (threshold, recall, precision); the first point is the (0, 1) anchor."""

    points: tuple
    no_positives: bool = False

    def recall_precision(self) -> list:
        return [(r, p) for _, r, p in self.points]


def pr_curve(y_true, scores) -> PrCurve:
    """Sweep every distinct score as a threshold (predict positive when score >= t), high to low."""
    y = np.asarray(y_true).astype(bool)
    s = np.asarray(scores, dtype=np.float64)
    if y.shape != s.shape:
        raise DataError("labels and scores must have equal length")
    if not np.isfinite(s).all():
        raise DataError("scores must be finite")
    n_pos = int(y.sum())
    if n_pos == 0:
        return PrCurve((), no_positives=True)
    order = np.argsort(-s, kind="stable")
    s, y = s[order], y[order]
    tp = np.cumsum(y)
    fp = np.cumsum(~y)
    # the last index of each run of equal scores closes one threshold
    ends = np.flatnonzero(np.r_[s[1:] != s[:-1], True])
    points = [(float("inf"), 0.0, 1.0)]
    for e in ends:
        t, f = int(tp[e]), int(fp[e])
        points.append((float(s[e]), t / n_pos, t / (t + f) if t + f else 1.0))
    return PrCurve(tuple(points))


# ---------------------------------------------------------------------- reports


def metrics_report(cm: ConfusionMatrix, meta: Optional[dict] = None) -> dict:
    rates = class_rates(cm)
    doc = {
        "class_names": list(cm.class_names),
        "confusion_matrix": cm.to_list(),
        "accuracy": accuracy(cm),
        "per_class_rates": {
            r.name: {"tp": r.tp, "fp": r.fp, "fn": r.fn, "tn": r.tn, "support": r.support,
                     "fpr": r.fpr, "fnr": r.fnr, "precision": r.precision, "recall": r.recall}
            for r in rates
        },
        "definitions": DEFINITIONS,
    }
    if meta is not None:
        doc["meta"] = meta
    return doc


def write_metrics_json(path, cm: ConfusionMatrix, meta: Optional[dict] = None):
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        json.dump(metrics_report(cm, meta), fh, indent=2, sort_keys=True)
        fh.write("\n")


def write_pr_csv(path, curves: dict):
    """``curves`` maps class name -> PrCurve. Classes without positives get one marker row."""
    with open(path, "w", encoding="utf-8", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["class", "threshold", "precision", "recall"])
        for name, curve in curves.items():
            if curve.no_positives:
                w.writerow([name, "no_positives", "", ""])
                continue
            for t, r, p in curve.points:
                w.writerow([name, repr(t), repr(p), repr(r)])
