"""Detector / grader training on manifests and the report tables built from
their scores."""

from __future__ import annotations

import csv
import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Mapping

import numpy as np

from .classifier import ClassifierConfig, LesionClassifier
from .imaging import CLASSIFIER_RANGE, from_uint8, load_png
from .manifest import ManifestRecord
from .metrics import ConfusionMetrics, auc, confusion_metrics, roc_curve, score_histogram, sensitivity_specificity

logger = logging.getLogger(__name__)

TABLE_COLUMNS = ("Dataset", "Accuracy", "Recall", "Precision", "F1", "AUC")
DECISION_THRESHOLD = 0.5
HISTOGRAM_BINS = 50


def load_manifest_images(records: list[ManifestRecord]) -> np.ndarray:
    images = []
    for rec in records:
        try:
            images.append(from_uint8(load_png(rec.path), CLASSIFIER_RANGE))
        except (OSError, ValueError) as exc:
            raise ValueError(f"cannot decode image for record {rec.id}: {exc}") from exc
    if not images:
        return np.zeros((0, 1, 1, 3), dtype=np.float32)
    return np.stack(images)


def structure_labels(records) -> np.ndarray:
    missing = [r.id for r in records if r.label_structure is None]
    if missing:
        raise ValueError(f"records without a structure label: {missing[:5]}")
    return np.array([int(r.label_structure) for r in records])


def diagnosis_labels(records) -> np.ndarray:
    missing = [r.id for r in records if r.label_diagnosis is None]
    if missing:
        raise ValueError(f"records without a diagnosis label: {missing[:5]}")
    return np.array([int(r.label_diagnosis == "melanoma") for r in records])


def train_detector(train: list[ManifestRecord], cfg: ClassifierConfig, valid: list[ManifestRecord] | None = None) -> LesionClassifier:
    """Fit a structure detector; logs per-epoch loss (and validation AUC)."""
    y = structure_labels(train)
    if y.min() == y.max():
        raise ValueError("training manifest holds a single class")
    X = load_manifest_images(train)
    kw = {}
    if valid:
        kw = {"X_val": load_manifest_images(valid), "y_val": structure_labels(valid)}
    return cfg.to_estimator().fit(X, y, **kw)


def predict(model: LesionClassifier, records: list[ManifestRecord]) -> np.ndarray:
    if not records:
        return np.zeros(0)
    return model.decision_function(load_manifest_images(records))


@dataclass
class GraderResult:
    model: LesionClassifier
    sensitivity: float
    specificity: float
    f1: float
    auc: float


def train_grader(train: list[ManifestRecord], cfg: ClassifierConfig, heldout: list[ManifestRecord]) -> GraderResult:
    """Fit a melanoma-vs-nevus grader and score it on a held-out split."""
    y = diagnosis_labels(train)
    if y.min() == y.max():
        raise ValueError("training manifest holds a single diagnosis")
    model = cfg.to_estimator().fit(load_manifest_images(train), y)
    scores = predict(model, heldout)
    y_test = diagnosis_labels(heldout)
    sens, spec = sensitivity_specificity(scores, y_test, DECISION_THRESHOLD)
    f1 = confusion_metrics(scores, y_test, DECISION_THRESHOLD).f1 / 100.0
    return GraderResult(model, sens, spec, f1, auc(scores, y_test))


def score_distribution(model: LesionClassifier, datasets: Mapping[str, list[ManifestRecord]], bins: int = HISTOGRAM_BINS) -> dict[str, np.ndarray]:
    """Normalized score histogram per named dataset; empty datasets are skipped."""
    out = {}
    for name, records in datasets.items():
        if not records:
            logger.warning("dataset %s is empty; omitted from the score distribution", name)
            continue
        out[name], _ = score_histogram(predict(model, records), bins)
    return out


@dataclass
class DetectionResult:
    dataset: str
    seed: int
    metrics: ConfusionMetrics
    auc: float
    roc: list


def evaluate_detector(model: LesionClassifier, test: list[ManifestRecord], dataset: str, seed: int) -> DetectionResult:
    scores = predict(model, test)
    y = structure_labels(test)
    return DetectionResult(dataset, seed, confusion_metrics(scores, y, DECISION_THRESHOLD), auc(scores, y), roc_curve(scores, y))


def _fmt(x: float) -> str:
    return repr(float(x))


def write_metric_table(rows: list[tuple[str, ConfusionMetrics, float]], path) -> None:
    """Accuracy/recall/precision/F1 in percent to one decimal, AUC to three."""
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(TABLE_COLUMNS)
        for name, m, a in rows:
            w.writerow([name, *m.as_percent_row(), f"{a:.3f}"])


def write_roc_csv(results: list[DetectionResult], path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(("dataset", "seed", "fpr", "tpr", "threshold"))
        for r in results:
            for fpr, tpr, thr in r.roc:
                w.writerow((r.dataset, r.seed, _fmt(fpr), _fmt(tpr), _fmt(thr)))


def write_histogram_csv(hists: list[tuple[str, int, np.ndarray]], path, bins: int = HISTOGRAM_BINS) -> None:
    edges = np.linspace(0.0, 1.0, bins + 1)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(("dataset", "seed", "bin_lo", "bin_hi", "mass"))
        for name, seed, masses in hists:
            for lo, hi, m in zip(edges[:-1], edges[1:], masses):
                w.writerow((name, seed, _fmt(lo), _fmt(hi), _fmt(m)))


def mean_metrics(results: list[DetectionResult]) -> tuple[ConfusionMetrics, float]:
    ms = [r.metrics for r in results]
    mean = ConfusionMetrics(
        float(np.mean([m.accuracy for m in ms])),
        float(np.mean([m.recall for m in ms])),
        float(np.mean([m.precision for m in ms])),
        float(np.mean([m.f1 for m in ms])),
        any(m.degenerate for m in ms),
    )
    return mean, float(np.mean([r.auc for r in results]))
