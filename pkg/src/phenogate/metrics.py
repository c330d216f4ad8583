"""Confusion matrices and one-vs-rest class metrics with fold aggregation.

PPV, NPV, prevalence, and per-class accuracy (recall) are kept as exact
integer counts per class; division happens on demand and a zero
denominator yields None rather than a fabricated zero, so cross-fold
means never silently absorb undefined values.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass
from fractions import Fraction
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .errors import EmptyMatrixError, InsufficientFoldsError, LabelOutOfRangeError

METRIC_NAMES = ("ppv", "npv", "prevalence", "accuracy")


class ConfusionMatrix:
    """counts[t][p] = records of true class t predicted as p."""

    def __init__(self, counts: np.ndarray, class_names: Sequence[str]):
        counts = np.asarray(counts, np.int64)
        if counts.ndim != 2 or counts.shape[0] != counts.shape[1]:
            raise ValueError("confusion matrix must be square")
        if counts.shape[0] != len(class_names):
            raise ValueError("class name count disagrees with matrix size")
        if (counts < 0).any():
            raise ValueError("confusion counts must be nonnegative")
        self.counts = counts
        self.class_names = tuple(class_names)

    @property
    def total(self) -> int:
        return int(self.counts.sum())

    def __add__(self, other: "ConfusionMatrix") -> "ConfusionMatrix":
        if self.class_names != other.class_names:
            raise ValueError("cannot merge matrices over different classes")
        return ConfusionMatrix(self.counts + other.counts, self.class_names)


def confusion_from_predictions(true_labels: Iterable[int],
                               pred_labels: Iterable[int],
                               class_names: Sequence[str]) -> ConfusionMatrix:
    t = np.asarray(list(true_labels) if not isinstance(true_labels, np.ndarray)
                   else true_labels, np.int64)
    p = np.asarray(list(pred_labels) if not isinstance(pred_labels, np.ndarray)
                   else pred_labels, np.int64)
    if len(t) != len(p):
        raise ValueError("true and predicted label counts differ")
    c = len(class_names)
    for arr, which in ((t, "true"), (p, "predicted")):
        if arr.size and (arr.min() < 0 or arr.max() >= c):
            bad = arr[(arr < 0) | (arr >= c)][0]
            raise LabelOutOfRangeError(f"{which} label {bad} outside [0, {c})")
    counts = np.zeros((c, c), np.int64)
    np.add.at(counts, (t, p), 1)
    return ConfusionMatrix(counts, class_names)


@dataclass(frozen=True)
class ClassMetricRow:
    class_name: str
    tp: int
    fp: int
    fn: int
    tn: int

    @property
    def support(self) -> int:
        return self.tp + self.fp + self.fn + self.tn

    def exact(self, metric: str) -> Fraction | None:
        """Metric as an exact rational, None when the denominator is zero."""
        if metric == "ppv":
            num, den = self.tp, self.tp + self.fp
        elif metric == "npv":
            num, den = self.tn, self.tn + self.fn
        elif metric == "prevalence":
            num, den = self.tp + self.fn, self.support
        elif metric == "accuracy":
            num, den = self.tp, self.tp + self.fn
        else:
            raise ValueError(f"unknown metric {metric!r}")
        return None if den == 0 else Fraction(num, den)

    def value(self, metric: str) -> float | None:
        frac = self.exact(metric)
        return None if frac is None else float(frac)

    @property
    def ppv(self) -> float | None:
        return self.value("ppv")

    @property
    def npv(self) -> float | None:
        return self.value("npv")

    @property
    def prevalence(self) -> float | None:
        return self.value("prevalence")

    @property
    def accuracy(self) -> float | None:
        return self.value("accuracy")


class ClassMetrics:
    def __init__(self, rows: Sequence[ClassMetricRow], total: int):
        self.rows = tuple(rows)
        self.total = total

    def __iter__(self):
        return iter(self.rows)

    def __getitem__(self, class_name: str) -> ClassMetricRow:
        for row in self.rows:
            if row.class_name == class_name:
                return row
        raise KeyError(class_name)


def class_metrics(cm: ConfusionMatrix) -> ClassMetrics:
    """One-vs-rest counts per class from a nonempty confusion matrix."""
    total = cm.total
    if total == 0:
        raise EmptyMatrixError("confusion matrix has no records")
    counts = cm.counts
    diag = np.diag(counts)
    col = counts.sum(axis=0)
    row = counts.sum(axis=1)
    rows = []
    for c, name in enumerate(cm.class_names):
        tp = int(diag[c])
        fp = int(col[c]) - tp
        fn = int(row[c]) - tp
        tn = total - tp - fp - fn
        rows.append(ClassMetricRow(name, tp, fp, fn, tn))
    return ClassMetrics(rows, total)


@dataclass(frozen=True)
class SummaryEntry:
    mean: float | None
    std: float | None
    n_folds: int
    n_excluded: int


class CrossFoldSummary:
    def __init__(self, class_names: Sequence[str],
                 entries: dict[tuple[str, str], SummaryEntry], fold_count: int):
        self.class_names = tuple(class_names)
        self.entries = entries
        self.fold_count = fold_count

    def entry(self, class_name: str, metric: str) -> SummaryEntry:
        return self.entries[(class_name, metric)]


def aggregate_folds(fold_metrics: Sequence[ClassMetrics]) -> CrossFoldSummary:
    """Mean and sample std per class/metric; undefined folds are excluded."""
    if len(fold_metrics) < 2:
        raise InsufficientFoldsError(
            f"need at least 2 folds, got {len(fold_metrics)}")
    class_names = tuple(row.class_name for row in fold_metrics[0])
    for fm in fold_metrics[1:]:
        if tuple(r.class_name for r in fm) != class_names:
            raise ValueError("fold metrics cover different class lists")
    entries: dict[tuple[str, str], SummaryEntry] = {}
    for name in class_names:
        for metric in METRIC_NAMES:
            values = [fm[name].value(metric) for fm in fold_metrics]
            defined = [v for v in values if v is not None]
            n = len(defined)
            excluded = len(values) - n
            if n == 0:
                entries[(name, metric)] = SummaryEntry(None, None, 0, excluded)
                continue
            mean = float(np.mean(defined))
            std = float(np.std(defined, ddof=1)) if n >= 2 else None
            entries[(name, metric)] = SummaryEntry(mean, std, n, excluded)
    return CrossFoldSummary(class_names, entries, len(fold_metrics))


def learned_flags(summary: CrossFoldSummary, ppv_cutoff: float = 0.3) -> dict[str, bool]:
    """Classes whose cross-fold mean PPV clears the cutoff."""
    out = {}
    for name in summary.class_names:
        mean = summary.entry(name, "ppv").mean
        out[name] = mean is not None and mean >= ppv_cutoff
    return out


def emit_report(summary: CrossFoldSummary, csv_path, json_path=None,
                ppv_cutoff: float = 0.3) -> dict[str, bool]:
    """Per-class rows for all four metrics; returns the learned flags."""
    flags = learned_flags(summary, ppv_cutoff)

    def fmt(v: float | None) -> str:
        return "" if v is None else repr(v)

    with open(csv_path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["class", "metric", "mean", "std", "n_folds",
                         "n_excluded", "flag_learned"])
        for name in summary.class_names:
            for metric in METRIC_NAMES:
                e = summary.entry(name, metric)
                writer.writerow([name, metric, fmt(e.mean), fmt(e.std),
                                 e.n_folds, e.n_excluded,
                                 "true" if flags[name] else "false"])
    if json_path is not None:
        doc = {
            "ppv_cutoff": ppv_cutoff,
            "fold_count": summary.fold_count,
            "classes": {
                name: {
                    "learned": flags[name],
                    "metrics": {
                        metric: {
                            "mean": summary.entry(name, metric).mean,
                            "std": summary.entry(name, metric).std,
                            "n_folds": summary.entry(name, metric).n_folds,
                            "n_excluded": summary.entry(name, metric).n_excluded,
                        }
                        for metric in METRIC_NAMES
                    },
                }
                for name in summary.class_names
            },
        }
        Path(json_path).write_text(json.dumps(doc, indent=2) + "\n",
                                   encoding="utf-8")
    return flags
