"""ROC/AUC, validation-chosen operating threshold, sensitivity and specificity."""

from __future__ import annotations

import csv
import math
import os
from dataclasses import asdict, dataclass

import numpy as np

from . import _kernels


class UndefinedMetricError(ValueError):
    """Raised when a metric needs both classes but only one is present."""


def _check(scores, labels):
    scores = np.asarray(scores, dtype=np.float64).reshape(-1)
    labels = np.asarray(labels).reshape(-1).astype(bool)
    if scores.shape != labels.shape:
        raise ValueError("scores and labels differ in length")
    if not np.all(np.isfinite(scores)):
        raise ValueError("scores must be finite")
    n_pos = int(labels.sum())
    if n_pos == 0 or n_pos == labels.shape[0]:
        raise UndefinedMetricError("both classes must be present")
    return scores, labels


def compute_auc(scores, labels) -> float:
    """Mann-Whitney AUC: P(score_pos > score_neg) with ties counted one half."""
    scores, labels = _check(scores, labels)
    return _kernels.mann_whitney_auc(scores, labels)


def roc_curve(scores, labels):
    """Operating points ``(fpr, tpr, thresholds)`` for ``score >= threshold``, thresholds descending.

    A leading point at ``+inf`` (nothing predicted positive) is included.
    """
    scores, labels = _check(scores, labels)
    thr, tps, fps = _kernels.roc_sweep(scores, labels)
    n_pos = labels.sum()
    n_neg = labels.shape[0] - n_pos
    fpr = np.concatenate(([0.0], fps / n_neg))
    tpr = np.concatenate(([0.0], tps / n_pos))
    return fpr, tpr, np.concatenate(([np.inf], thr))


def optimal_threshold(val_scores, val_labels) -> float:
    """Score threshold maximising Youden's J on the validation ROC.

    Candidates are the observed scores. J is compared in exact integer
    arithmetic; ties go to the highest threshold.
    """
    scores, labels = _check(val_scores, val_labels)
    thr, tps, fps = _kernels.roc_sweep(scores, labels)
    n_pos = int(labels.sum())
    n_neg = labels.shape[0] - n_pos
    # J * n_pos * n_neg = tp * n_neg + tn * n_pos - n_pos * n_neg
    j_scaled = tps.astype(np.int64) * n_neg - fps.astype(np.int64) * n_pos
    # thresholds are descending, so argmax returns the highest among ties
    return float(thr[int(np.argmax(j_scaled))])


def sensitivity_specificity(test_scores, test_labels, threshold: float) -> tuple[float, float]:
    scores, labels = _check(test_scores, test_labels)
    pred = scores >= threshold
    tp = int(np.sum(pred & labels))
    tn = int(np.sum(~pred & ~labels))
    return tp / int(labels.sum()), tn / int((~labels).sum())


@dataclass
class MetricsReport:
    auc: float
    threshold: float
    sensitivity: float
    specificity: float
    n_pos: int
    n_neg: int
    trial_id: int = 0
    experiment_id: str = ""
    val_auc: float = float("nan")
    threshold_rule: str = "youden_j"

    def __post_init__(self):
        for name in ("auc", "sensitivity", "specificity"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise ValueError(f"{name}={v} outside [0, 1]")
        if not math.isfinite(self.threshold):
            raise ValueError("threshold must be finite")

    def to_dict(self) -> dict:
        return asdict(self)


def evaluate_scores(val_scores, val_labels, test_scores, test_labels, trial_id: int = 0,
                    experiment_id: str = "") -> MetricsReport:
    """Threshold from the validation fold, metrics on the test fold."""
    t = optimal_threshold(val_scores, val_labels)
    sens, spec = sensitivity_specificity(test_scores, test_labels, t)
    labels = np.asarray(test_labels).astype(bool)
    return MetricsReport(
        auc=compute_auc(test_scores, test_labels),
        threshold=t,
        sensitivity=sens,
        specificity=spec,
        n_pos=int(labels.sum()),
        n_neg=int((~labels).sum()),
        trial_id=trial_id,
        experiment_id=experiment_id,
        val_auc=compute_auc(val_scores, val_labels),
    )


def mean_sd(values) -> tuple[float, float, bool]:
    """Mean and sample standard deviation; the flag is set when n == 1 (sd reported as 0)."""
    v = np.asarray(values, dtype=np.float64)
    if v.size == 0:
        raise ValueError("no values")
    if v.size == 1:
        return float(v[0]), 0.0, True
    return float(v.mean()), float(v.std(ddof=1)), False


def write_roc_csv(path: str | os.PathLike, scores, labels) -> None:
    fpr, tpr, thr = roc_curve(scores, labels)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["threshold", "fpr", "tpr"])
        for row in zip(thr, fpr, tpr):
            w.writerow([repr(float(x)) for x in row])
