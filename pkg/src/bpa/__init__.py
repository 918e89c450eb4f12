"""Bulk production augmentation for rare dermoscopic structures."""

from .checklist import ChecklistAssessment
from .classifier import ClassifierConfig, LesionClassifier
from .cycle import CycleTranslator
from .metrics import auc, roc_curve
from .progressive import ProgressiveGAN

__all__ = [
    "ChecklistAssessment",
    "ClassifierConfig",
    "CycleTranslator",
    "LesionClassifier",
    "ProgressiveGAN",
    "auc",
    "roc_curve",
]
__version__ = "0.1.0"
