"""Binary-classification metrics: rank AUC, ROC points, confusion metrics and
score histograms."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np


def _check_binary(scores, labels) -> tuple[np.ndarray, np.ndarray]:
    scores = np.asarray(scores, dtype=np.float64).ravel()
    labels = np.asarray(labels).ravel()
    if scores.shape != labels.shape:
        raise ValueError(f"scores and labels differ in length: {scores.shape[0]} vs {labels.shape[0]}")
    if not np.isin(labels, (0, 1)).all():
        raise ValueError("labels must be 0 or 1")
    labels = labels.astype(np.int64)
    n_pos = int(labels.sum())
    if n_pos == 0 or n_pos == labels.size:
        raise ValueError("both classes must be present")
    return scores, labels


def auc(scores, labels) -> float:
    """P(score_pos > score_neg) + 0.5 * P(tie), counted exactly over all pairs."""
    scores, labels = _check_binary(scores, labels)
    neg = np.sort(scores[labels == 0])
    pos = scores[labels == 1]
    below = np.searchsorted(neg, pos, side="left")
    not_above = np.searchsorted(neg, pos, side="right")
    # doubled counts stay integral: 2*greater + ties
    twice = int((2 * below + (not_above - below)).sum())
    return twice / (2 * pos.size * neg.size)


def roc_curve(scores, labels) -> list[tuple[float, float, float]]:
    """(fpr, tpr, threshold) for every distinct score, highest first.

    A sample is predicted positive when ``score >= threshold``. The leading
    ``+inf`` sentinel gives the (0, 0) point.
    """
    scores, labels = _check_binary(scores, labels)
    order = np.argsort(-scores, kind="mergesort")
    s = scores[order]
    y = labels[order]
    n_pos = int(y.sum())
    n_neg = y.size - n_pos
    tp = np.cumsum(y)
    fp = np.cumsum(1 - y)
    # last index of each run of equal scores
    ends = np.flatnonzero(np.r_[s[1:] != s[:-1], True])
    points = [(0.0, 0.0, math.inf)]
    for i in ends:
        points.append((fp[i] / n_neg, tp[i] / n_pos, float(s[i])))
    return points


def trapezoid_area(points) -> float:
    area = 0.0
    for (x0, y0, _), (x1, y1, _) in zip(points[:-1], points[1:]):
        area += (x1 - x0) * (y0 + y1) / 2.0
    return area


@dataclass(frozen=True)
class ConfusionMetrics:
    accuracy: float
    recall: float
    precision: float
    f1: float
    degenerate: bool = False

    def as_percent_row(self) -> list[str]:
        return [f"{v:.1f}" for v in (self.accuracy, self.recall, self.precision, self.f1)]


def confusion_metrics(scores, labels, threshold: float = 0.5) -> ConfusionMetrics:
    """Accuracy, recall, precision and F1 as percentages.

    With no predicted positives precision is undefined; it is reported as 0
    and ``degenerate`` is set.
    """
    scores, labels = _check_binary(scores, labels)
    pred = scores >= threshold
    truth = labels == 1
    tp = int(np.sum(pred & truth))
    fp = int(np.sum(pred & ~truth))
    fn = int(np.sum(~pred & truth))
    tn = int(np.sum(~pred & ~truth))
    accuracy = (tp + tn) / labels.size
    recall = tp / (tp + fn)
    degenerate = tp + fp == 0
    precision = 0.0 if degenerate else tp / (tp + fp)
    f1 = 0.0 if precision + recall == 0 else 2 * precision * recall / (precision + recall)
    return ConfusionMetrics(100 * accuracy, 100 * recall, 100 * precision, 100 * f1, degenerate)


def sensitivity_specificity(scores, labels, threshold: float = 0.5) -> tuple[float, float]:
    scores, labels = _check_binary(scores, labels)
    pred = scores >= threshold
    sens = float(np.mean(pred[labels == 1]))
    spec = float(np.mean(~pred[labels == 0]))
    return sens, spec


def score_histogram(scores, bins: int = 50) -> tuple[np.ndarray, np.ndarray]:
    """Normalized mass per uniform bin on [0, 1]; returns (masses, edges)."""
    scores = np.asarray(scores, dtype=np.float64).ravel()
    if scores.size == 0:
        raise ValueError("cannot histogram an empty score set")
    counts, edges = np.histogram(np.clip(scores, 0.0, 1.0), bins=bins, range=(0.0, 1.0))
    return counts / counts.sum(), edges


def histogram_l1(p, q) -> float:
    return float(np.abs(np.asarray(p) - np.asarray(q)).sum())
