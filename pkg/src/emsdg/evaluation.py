"""Confusion matrices, macro and one-vs-all metrics, report tables.

Multiclass specificity is one-vs-rest per class, macro-averaged. A per-class
metric with a zero denominator counts as 0 in the macro mean.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from typing import Iterable

import numpy as np

REPORT_HEADER = ["setting", "cohort", "acc", "sen", "spe", "f1"]
REPORT_FOOTER = ("# SPE is one-vs-rest per class, macro-averaged; "
                 "undefined per-class metrics count as 0")


@dataclass
class MetricsReport:
    accuracy: float
    sensitivity: float
    specificity: float
    f1: float
    precision: float
    per_class: dict = field(default_factory=dict)  # metric name -> list over classes

    def as_row(self) -> list[float]:
        return [self.accuracy, self.sensitivity, self.specificity, self.f1]

    def to_dict(self) -> dict:
        return {"acc": self.accuracy, "sen": self.sensitivity, "spe": self.specificity,
                "f1": self.f1, "pre": self.precision,
                "per_class": {k: list(v) for k, v in self.per_class.items()}}


def _as_labels(values, K, what):
    arr = np.asarray(values, dtype=np.int64).reshape(-1)
    bad = arr[(arr < 0) | (arr >= K)]
    if bad.size:
        raise ValueError(f"{what} contain out-of-range class {int(bad[0])} for K={K}")
    return arr


def confusion(labels, predictions, K: int) -> np.ndarray:
    """counts[true, predicted]."""
    y = _as_labels(labels, K, "labels")
    p = _as_labels(predictions, K, "predictions")
    if y.shape != p.shape:
        raise ValueError(f"{y.size} labels vs {p.size} predictions")
    if y.size == 0:
        raise ValueError("need at least one labeled prediction")
    cm = np.zeros((K, K), dtype=np.int64)
    np.add.at(cm, (y, p), 1)
    return cm


def _ratio(num: np.ndarray, den: np.ndarray) -> np.ndarray:
    num = num.astype(np.float64)
    den = den.astype(np.float64)
    return np.divide(num, den, out=np.zeros_like(num), where=den > 0)


def macro_metrics(cm) -> MetricsReport:
    cm = np.asarray(cm, dtype=np.int64)
    total = cm.sum()
    if total < 1:
        raise ValueError("confusion matrix is empty")
    tp = np.diag(cm)
    fn = cm.sum(axis=1) - tp
    fp = cm.sum(axis=0) - tp
    tn = total - tp - fn - fp
    sen = _ratio(tp, tp + fn)
    spe = _ratio(tn, tn + fp)
    pre = _ratio(tp, tp + fp)
    f1 = _ratio(2 * pre * sen, pre + sen)
    return MetricsReport(
        accuracy=float(tp.sum() / total),
        sensitivity=float(sen.mean()),
        specificity=float(spe.mean()),
        f1=float(f1.mean()),
        precision=float(pre.mean()),
        per_class={"sen": sen.tolist(), "spe": spe.tolist(), "pre": pre.tolist(), "f1": f1.tolist()},
    )


def one_vs_all(labels, predictions, positive: int, K: int | None = None) -> MetricsReport:
    """Binary metrics for ``positive`` against every other class pooled."""
    y = np.asarray(labels, dtype=np.int64).reshape(-1)
    p = np.asarray(predictions, dtype=np.int64).reshape(-1)
    if K is None:
        K = int(max(y.max(initial=0), p.max(initial=0), positive)) + 1
    if K < 2:
        raise ValueError("one-vs-all needs at least 2 classes")
    cm = confusion(y, p, K)
    return one_vs_all_from_confusion(cm, positive)


def one_vs_all_from_confusion(cm, positive: int) -> MetricsReport:
    cm = np.asarray(cm, dtype=np.int64)
    tp = cm[positive, positive]
    fn = cm[positive].sum() - tp
    fp = cm[:, positive].sum() - tp
    tn = cm.sum() - tp - fn - fp
    one = lambda a, b: float(_ratio(np.array([a]), np.array([b]))[0])
    sen, spe, pre = one(tp, tp + fn), one(tn, tn + fp), one(tp, tp + fp)
    f1 = 2 * pre * sen / (pre + sen) if pre + sen > 0 else 0.0
    return MetricsReport(accuracy=float((tp + tn) / cm.sum()), sensitivity=sen,
                         specificity=spe, f1=f1, precision=pre)


def format_report_row(setting: str, cohort: str, report: MetricsReport) -> list[str]:
    return [setting, cohort] + [f"{v:.4f}" for v in report.as_row()]


def write_report_csv(rows: Iterable[list[str]], path, footer: bool = True) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(REPORT_HEADER)
        for r in rows:
            w.writerow(r)
        if footer:
            fh.write(REPORT_FOOTER + "\n")


def read_report_csv(path) -> list[dict]:
    with open(path, newline="", encoding="utf-8") as fh:
        lines = [ln for ln in fh if not ln.startswith("#")]
    return list(csv.DictReader(lines))
