"""Confusion counts, accuracy/precision/recall/F1 and rank-based ROC AUC."""

from __future__ import annotations

import enum
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

import numpy as np

from hsiplastic.cube_io import IGNORE, LabelMask


class MetricsError(ValueError):
    pass


class Averaging(str, enum.Enum):
    BINARY = "binary"
    WEIGHTED = "weighted"


@dataclass(frozen=True)
class ConfusionCounts:
    tp: int = 0
    fp: int = 0
    tn: int = 0
    fn: int = 0

    def __post_init__(self) -> None:
        if min(self.tp, self.fp, self.tn, self.fn) < 0:
            raise MetricsError("confusion counts must be non-negative")

    @property
    def total(self) -> int:
        return self.tp + self.fp + self.tn + self.fn

    def __add__(self, other: ConfusionCounts) -> ConfusionCounts:
        return ConfusionCounts(self.tp + other.tp, self.fp + other.fp, self.tn + other.tn, self.fn + other.fn)

    def to_dict(self) -> dict[str, int]:
        return {"tp": self.tp, "fp": self.fp, "tn": self.tn, "fn": self.fn}


@dataclass
class MetricsReport:
    accuracy: float
    precision: float
    recall: float
    f1: float
    counts: ConfusionCounts
    averaging: Averaging = Averaging.WEIGHTED
    auc: float | None = None
    # names of metrics whose denominator was zero (reported as 0)
    undefined: list[str] = field(default_factory=list)

    def to_dict(self, **context: Any) -> dict[str, Any]:
        d = dict(context)
        d.update(
            accuracy=self.accuracy,
            precision=self.precision,
            recall=self.recall,
            f1=self.f1,
            auc=self.auc,
            counts=self.counts.to_dict(),
            averaging=self.averaging.value,
            undefined=sorted(self.undefined),
        )
        return d


def confusion(pred: LabelMask | np.ndarray, truth: LabelMask | np.ndarray) -> ConfusionCounts:
    """Count outcomes over pixels that neither mask ignores; class 1 is positive."""
    p = pred.labels if isinstance(pred, LabelMask) else np.asarray(pred)
    t = truth.labels if isinstance(truth, LabelMask) else np.asarray(truth)
    if p.shape != t.shape:
        raise MetricsError(f"prediction shape {p.shape} differs from truth {t.shape}")
    keep = (p != IGNORE) & (t != IGNORE)
    p = p[keep]
    t = t[keep]
    tp = int(np.count_nonzero((p == 1) & (t == 1)))
    fp = int(np.count_nonzero((p == 1) & (t == 0)))
    tn = int(np.count_nonzero((p == 0) & (t == 0)))
    fn = int(np.count_nonzero((p == 0) & (t == 1)))
    return ConfusionCounts(tp, fp, tn, fn)


def _ratio(num: float, den: float) -> tuple[float, bool]:
    return (num / den, True) if den > 0 else (0.0, False)


def _prf(tp: int, fp: int, fn: int) -> tuple[float, float, float, list[str]]:
    undefined = []
    precision, ok = _ratio(tp, tp + fp)
    if not ok:
        undefined.append("precision")
    recall, ok = _ratio(tp, tp + fn)
    if not ok:
        undefined.append("recall")
    f1, ok = _ratio(2 * precision * recall, precision + recall)
    if not ok:
        undefined.append("f1")
    return precision, recall, f1, undefined


def classification_metrics(counts: ConfusionCounts, averaging: Averaging | str = Averaging.WEIGHTED) -> MetricsReport:
    """Accuracy, precision, recall and F1 from confusion counts.

    ``binary`` scores the plastic class alone. ``weighted`` averages the
    per-class scores of both classes with their true-class supports as
    weights; weighted recall then always equals accuracy.
    """
    averaging = Averaging(averaging)
    n = counts.total
    if n == 0:
        raise MetricsError("no evaluated pixels")
    accuracy = (counts.tp + counts.tn) / n
    if averaging is Averaging.BINARY:
        p, r, f, undefined = _prf(counts.tp, counts.fp, counts.fn)
        return MetricsReport(accuracy, p, r, f, counts, averaging, undefined=undefined)

    pos_support = counts.tp + counts.fn
    neg_support = counts.tn + counts.fp
    p1, r1, f1_, u1 = _prf(counts.tp, counts.fp, counts.fn)
    # negative class: its "true positives" are tn
    p0, r0, f0, u0 = _prf(counts.tn, counts.fn, counts.fp)
    w1 = pos_support / n
    w0 = neg_support / n
    # a class with zero support carries zero weight, so its gaps do not matter
    undefined = sorted(set(u1 if pos_support else []) | set(u0 if neg_support else []))
    return MetricsReport(
        accuracy,
        w1 * p1 + w0 * p0,
        w1 * r1 + w0 * r0,
        w1 * f1_ + w0 * f0,
        counts,
        averaging,
        undefined=undefined,
    )


def _average_ranks(values: np.ndarray) -> np.ndarray:
    """1-based ranks with ties sharing the mean of their positions."""
    order = np.argsort(values, kind="mergesort")
    sorted_vals = values[order]
    n = values.size
    # boundaries of runs of equal values
    starts = np.flatnonzero(np.r_[True, sorted_vals[1:] != sorted_vals[:-1]])
    ends = np.r_[starts[1:], n]
    run_rank = (starts + ends + 1) / 2.0
    ranks = np.empty(n, dtype=np.float64)
    ranks[order] = np.repeat(run_rank, ends - starts)
    return ranks


def roc_auc(scores, labels) -> float:
    """Area under the ROC curve via the Mann-Whitney rank-sum statistic.

    Equal to the fraction of (positive, negative) pairs where the positive
    scores higher, with ties counting one half.
    """
    s = np.asarray(scores, dtype=np.float64).ravel()
    y = np.asarray(labels).ravel()
    if s.shape != y.shape:
        raise MetricsError("scores and labels differ in length")
    if not np.all(np.isfinite(s)):
        raise MetricsError("scores must be finite")
    pos = y == 1
    n_pos = int(pos.sum())
    n_neg = int((y == 0).sum())
    if n_pos + n_neg != y.size:
        raise MetricsError("labels must be 0 or 1")
    if n_pos == 0 or n_neg == 0:
        raise MetricsError("AUC is undefined unless both classes are present")
    ranks = _average_ranks(s)
    u = ranks[pos].sum() - n_pos * (n_pos + 1) / 2.0
    return float(u / (n_pos * n_neg))


def roc_auc_bruteforce(scores, labels) -> float:
    """O(N^2) pairwise reference for :func:`roc_auc`."""
    s = np.asarray(scores, dtype=np.float64).ravel()
    y = np.asarray(labels).ravel()
    sp = s[y == 1]
    sn = s[y == 0]
    if sp.size == 0 or sn.size == 0:
        raise MetricsError("AUC is undefined unless both classes are present")
    wins = 0.0
    for v in sp:
        wins += np.count_nonzero(v > sn) + 0.5 * np.count_nonzero(v == sn)
    return wins / (sp.size * sn.size)


def roc_curve(scores, labels) -> tuple[np.ndarray, np.ndarray]:
    """False- and true-positive rates at every distinct threshold, from (0, 0) to (1, 1)."""
    s = np.asarray(scores, dtype=np.float64).ravel()
    y = np.asarray(labels).ravel()
    order = np.argsort(-s, kind="mergesort")
    s = s[order]
    y = y[order]
    last = np.r_[np.flatnonzero(s[1:] != s[:-1]), s.size - 1]
    tps = np.cumsum(y == 1)[last]
    fps = np.cumsum(y == 0)[last]
    n_pos = max(int((y == 1).sum()), 1)
    n_neg = max(int((y == 0).sum()), 1)
    return np.r_[0.0, fps / n_neg], np.r_[0.0, tps / n_pos]


def evaluate(pred: LabelMask, truth: LabelMask, scores: np.ndarray | None = None,
             averaging: Averaging | str = Averaging.WEIGHTED) -> MetricsReport:
    """Full report for one prediction; ``scores`` is per evaluated pixel in scan order."""
    report = classification_metrics(confusion(pred, truth), averaging)
    if scores is not None:
        keep = (pred.labels != IGNORE) & (truth.labels != IGNORE)
        y = truth.labels[keep]
        s = np.asarray(scores)
        if s.shape == truth.shape:
            s = s[keep]
        if s.size != y.size:
            raise MetricsError("scores must cover exactly the evaluated pixels")
        try:
            report.auc = roc_auc(s, y)
        except MetricsError:
            report.auc = None
            report.undefined = sorted({*report.undefined, "auc"})
    return report


def save_report(report: MetricsReport, path: str | Path, **context: Any) -> None:
    with open(path, "w") as fh:
        json.dump(report.to_dict(**context), fh, indent=2, sort_keys=True)
        fh.write("\n")
