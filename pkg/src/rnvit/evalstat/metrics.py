"""ROC/AUC, confusion-matrix metrics and across-fold dispersion."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np


@dataclass
class RocCurve:
    thresholds: np.ndarray  # descending; the first point (0, 0) uses +inf
    fpr: np.ndarray
    tpr: np.ndarray
    auc: float


def _check_binary(labels):
    y = np.asarray(labels).astype(int)
    if not set(np.unique(y)) <= {0, 1}:
        raise ValueError("labels must be 0/1")
    if y.min() == y.max():
        raise ValueError("ROC analysis needs both classes present")
    return y


def roc_auc(scores, labels) -> RocCurve:
    """ROC over all distinct thresholds; tied scores form a single step."""
    s = np.asarray(scores, dtype=np.float64)
    y = _check_binary(labels)
    order = np.argsort(-s, kind="mergesort")
    s, y = s[order], y[order]
    # last index of each run of equal scores
    ends = np.r_[np.flatnonzero(np.diff(s) != 0), len(s) - 1]
    tp = np.cumsum(y)[ends]
    fp = (ends + 1) - tp
    P, N = y.sum(), len(y) - y.sum()
    tpr = np.r_[0.0, tp / P]
    fpr = np.r_[0.0, fp / N]
    auc = float(np.sum((fpr[1:] - fpr[:-1]) * (tpr[1:] + tpr[:-1]) / 2.0))
    return RocCurve(np.r_[np.inf, s[ends]], fpr, tpr, auc)


def auc(scores, labels) -> float:
    return roc_auc(scores, labels).auc


def threshold_metrics(scores, labels, tau: float = 0.5) -> dict:
    """Accuracy, sensitivity and specificity with necrosis (1) as positive."""
    s = np.asarray(scores, dtype=np.float64)
    y = _check_binary(labels)
    pred = s >= tau
    tp = int(np.sum(pred & (y == 1)))
    fn = int(np.sum(~pred & (y == 1)))
    tn = int(np.sum(~pred & (y == 0)))
    fp = int(np.sum(pred & (y == 0)))
    return {
        "accuracy": (tp + tn) / len(y),
        "sensitivity": tp / (tp + fn),
        "specificity": tn / (tn + fp),
        "tp": tp, "fn": fn, "tn": tn, "fp": fp,
    }


@dataclass
class Dispersion:
    mean: float
    sd: float
    n: int

    def __str__(self):
        return f"{self.mean:.3f} ± {self.sd:.3f}"


def fold_dispersion(values) -> Dispersion:
    v = np.asarray(values, dtype=np.float64)
    if v.size < 2:
        raise ValueError("need at least two fold values")
    return Dispersion(float(v.mean()), float(v.std(ddof=1)), int(v.size))


def write_roc_csv(path, curve: RocCurve) -> None:
    with open(path, "w") as fh:
        fh.write("threshold,fpr,tpr\n")
        for t, f, p in zip(curve.thresholds, curve.fpr, curve.tpr):
            fh.write(f"{t!r},{f!r},{p!r}\n")
