"""Binary lesion classifiers (structure detector and malignancy grader).

A pluggable feature extractor feeds a linear head with a sigmoid output.
Training uses momentum SGD and a class-weighted binary cross-entropy.
"""

from __future__ import annotations

import logging
from dataclasses import asdict, dataclass, field

import numpy as np
import torch
from sklearn.base import BaseEstimator, ClassifierMixin
from sklearn.exceptions import NotFittedError
from torch import nn

from .augment import AugmentPolicy, augment
from .checkpoint import config_hash, load_archive, read_header, save_archive
from .imaging import CLASSIFIER_RANGE, check_images, resize_batch
from .metrics import auc
from .torch_utils import deterministic_mode, to_nchw

logger = logging.getLogger(__name__)

PROB_EPS = 1e-7


def class_weights(n_neg: int, n_pos: int) -> tuple[float, float]:
    """Inverse-frequency weights ``total / (2 * n_class)``; (1, 1) when balanced."""
    if n_neg < 1 or n_pos < 1:
        raise ValueError(f"both classes need at least one sample, got n_neg={n_neg}, n_pos={n_pos}")
    total = n_neg + n_pos
    return total / (2 * n_neg), total / (2 * n_pos)


def weighted_loss(scores: torch.Tensor, labels: torch.Tensor, weights: tuple[float, float]) -> torch.Tensor:
    """Batch mean of ``w_label * BCE(score, label)`` on sigmoid scores."""
    if scores.numel() == 0:
        raise ValueError("empty batch")
    w_neg, w_pos = weights
    if w_neg <= 0 or w_pos <= 0:
        raise ValueError("class weights must be positive")
    scores = scores.reshape(-1).clamp(PROB_EPS, 1.0 - PROB_EPS)
    labels = labels.reshape(-1).to(scores.dtype)
    bce = -(labels * torch.log(scores) + (1.0 - labels) * torch.log(1.0 - scores))
    w = labels * w_pos + (1.0 - labels) * w_neg
    return torch.mean(w * bce)


class SmallCNN(nn.Module):
    """Compact extractor for desk-scale inputs (32-64 px)."""

    def __init__(self, width=16):
        super().__init__()
        w = width

        def block(i, o):
            return [nn.Conv2d(i, o, 3, padding=1, bias=False), nn.BatchNorm2d(o), nn.ReLU(inplace=True)]

        self.net = nn.Sequential(
            *block(3, w), *block(w, w), nn.MaxPool2d(2),
            *block(w, 2 * w), nn.MaxPool2d(2),
            *block(2 * w, 4 * w),
            nn.AdaptiveAvgPool2d(1), nn.Flatten(),
        )
        self.out_features = 4 * w

    def forward(self, x):
        return self.net(x)


class EfficientNetB1(nn.Module):
    """torchvision EfficientNet-B1 trunk; ImageNet weights only when asked."""

    def __init__(self, pretrained=False):
        super().__init__()
        from torchvision.models import EfficientNet_B1_Weights, efficientnet_b1

        weights = EfficientNet_B1_Weights.IMAGENET1K_V1 if pretrained else None
        model = efficientnet_b1(weights=weights)
        self.net = nn.Sequential(model.features, model.avgpool, nn.Flatten())
        self.out_features = model.classifier[-1].in_features

    def forward(self, x):
        return self.net(x)


BACKBONES = {
    "small_cnn": lambda: SmallCNN(16),
    "efficientnet_b1": lambda: EfficientNetB1(pretrained=False),
    "efficientnet_b1_imagenet": lambda: EfficientNetB1(pretrained=True),
}


class BinaryNet(nn.Module):
    def __init__(self, backbone: str):
        super().__init__()
        if backbone not in BACKBONES:
            raise ValueError(f"unknown backbone {backbone!r}; choose from {sorted(BACKBONES)}")
        self.features = BACKBONES[backbone]()
        self.head = nn.Linear(self.features.out_features, 1)

    def forward(self, x):
        return torch.sigmoid(self.head(self.features(x))).view(-1)


@dataclass
class ClassifierConfig:
    """Classifier hyperparameters; defaults are the full-scale setting.

    ``weight_decay_mode`` picks how ``weight_decay`` is read: ``"coefficient"``
    applies it as the optimizer's L2 coefficient every step; ``"lr_decay"``
    divides the learning rate by ``1 + weight_decay * epoch``.
    """

    backbone: str = "efficientnet_b1_imagenet"
    input_size: int = 240
    learning_rate: float = 1e-5
    momentum: float = 0.9
    weight_decay: float = 1e-6
    weight_decay_mode: str = "coefficient"
    crop_scale: tuple = (0.5, 1.0)
    flip_p: float = 0.5
    randaugment_n: int = 6
    randaugment_m: int = 8
    augment: bool = True
    weighted: bool = True
    epochs: int = 30
    batch_size: int = 32
    seed: int = 0
    deterministic: bool = True

    def __post_init__(self):
        self.crop_scale = tuple(self.crop_scale)
        if self.weight_decay_mode not in ("coefficient", "lr_decay"):
            raise ValueError(f"unknown weight_decay_mode {self.weight_decay_mode!r}")
        if self.epochs < 1 or self.batch_size < 1:
            raise ValueError("epochs and batch_size must be >= 1")
        self.policy()

    def policy(self) -> AugmentPolicy:
        return AugmentPolicy(
            input_size=self.input_size,
            enabled=self.augment,
            crop_scale=self.crop_scale,
            flip_p=self.flip_p,
            n_ops=self.randaugment_n,
            magnitude=self.randaugment_m,
        )

    def to_estimator(self) -> "LesionClassifier":
        return LesionClassifier(**asdict(self))


class LesionClassifier(ClassifierMixin, BaseEstimator):
    """Sigmoid-output binary classifier over ``[0, 1]`` RGB images."""

    def __init__(
        self,
        backbone="small_cnn",
        input_size=240,
        learning_rate=1e-5,
        momentum=0.9,
        weight_decay=1e-6,
        weight_decay_mode="coefficient",
        crop_scale=(0.5, 1.0),
        flip_p=0.5,
        randaugment_n=6,
        randaugment_m=8,
        augment=True,
        weighted=True,
        epochs=30,
        batch_size=32,
        seed=0,
        deterministic=True,
    ):
        self.backbone = backbone
        self.input_size = input_size
        self.learning_rate = learning_rate
        self.momentum = momentum
        self.weight_decay = weight_decay
        self.weight_decay_mode = weight_decay_mode
        self.crop_scale = crop_scale
        self.flip_p = flip_p
        self.randaugment_n = randaugment_n
        self.randaugment_m = randaugment_m
        self.augment = augment
        self.weighted = weighted
        self.epochs = epochs
        self.batch_size = batch_size
        self.seed = seed
        self.deterministic = deterministic

    @property
    def config(self) -> ClassifierConfig:
        return ClassifierConfig(**self.get_params())

    @property
    def config_hash(self) -> str:
        return config_hash({"kind": "lesion_classifier", **self.get_params()})

    def _build(self):
        torch.manual_seed(self.seed)
        self.model_ = BinaryNet(self.backbone)
        wd = self.weight_decay if self.weight_decay_mode == "coefficient" else 0.0
        self.optimizer_ = torch.optim.SGD(self.model_.parameters(), lr=self.learning_rate, momentum=self.momentum, weight_decay=wd)
        self.classes_ = np.array([0, 1])

    def fit(self, X, y, X_val=None, y_val=None):
        X = check_images(X, value_range=CLASSIFIER_RANGE)
        y = np.asarray(y).astype(np.int64).ravel()
        if len(X) != len(y):
            raise ValueError("X and y differ in length")
        n_pos = int(y.sum())
        n_neg = len(y) - n_pos
        if n_pos == 0 or n_neg == 0:
            raise ValueError("training data must contain both classes")
        self._build()
        self.class_weights_ = class_weights(n_neg, n_pos) if self.weighted else (1.0, 1.0)
        policy = self.config.policy()
        rng = np.random.default_rng(self.seed)
        self.history_ = []
        with deterministic_mode(self.deterministic):
            for epoch in range(self.epochs):
                if self.weight_decay_mode == "lr_decay":
                    for group in self.optimizer_.param_groups:
                        group["lr"] = self.learning_rate / (1.0 + self.weight_decay * epoch)
                self.model_.train()
                order = rng.permutation(len(X))
                total, seen = 0.0, 0
                for i in range(0, len(order), self.batch_size):
                    idx = order[i : i + self.batch_size]
                    if len(idx) < 2 and len(order) > 1:
                        continue  # batch norm needs more than one sample
                    batch = np.stack([augment(X[j], policy, rng) for j in idx])
                    scores = self.model_(to_nchw(batch))
                    loss = weighted_loss(scores, torch.from_numpy(y[idx]), self.class_weights_)
                    self.optimizer_.zero_grad(set_to_none=True)
                    loss.backward()
                    self.optimizer_.step()
                    total += loss.item() * len(idx)
                    seen += len(idx)
                row = {"epoch": epoch + 1, "loss": total / max(seen, 1)}
                if X_val is not None:
                    row["val_auc"] = auc(self.predict_proba(X_val)[:, 1], y_val)
                self.history_.append(row)
                logger.debug("epoch %d loss %.4f", epoch + 1, row["loss"])
        return self

    def _check_fitted(self):
        if not hasattr(self, "model_"):
            raise NotFittedError("LesionClassifier is not fitted")

    def decision_function(self, X, batch_size=256) -> np.ndarray:
        """Sigmoid scores in ``[0, 1]``; no augmentation."""
        self._check_fitted()
        X = check_images(X, value_range=CLASSIFIER_RANGE)
        if len(X) == 0:
            return np.zeros(0, dtype=np.float64)
        X = resize_batch(X, self.input_size)
        self.model_.eval()
        out = []
        with torch.no_grad(), deterministic_mode(self.deterministic):
            for i in range(0, len(X), batch_size):
                out.append(self.model_(to_nchw(X[i : i + batch_size])).double().numpy())
        return np.concatenate(out)

    def predict_proba(self, X) -> np.ndarray:
        p = self.decision_function(X)
        return np.stack([1.0 - p, p], axis=1)

    def predict(self, X, threshold=0.5) -> np.ndarray:
        return (self.decision_function(X) >= threshold).astype(np.int64)

    def save(self, path):
        self._check_fitted()
        header = {
            "kind": "lesion_classifier",
            "params": {k: list(v) if isinstance(v, tuple) else v for k, v in self.get_params().items()},
            "config_hash": self.config_hash,
            "class_weights": list(self.class_weights_),
        }
        save_archive(path, header, {"model": self.model_}, {"history": self.history_})

    @classmethod
    def load(cls, path):
        header = read_header(path)
        if header.get("kind") != "lesion_classifier":
            raise ValueError(f"{path} is not a classifier checkpoint")
        params = dict(header["params"])
        params["crop_scale"] = tuple(params["crop_scale"])
        model = cls(**params)
        model._build()
        _, state = load_archive(path, {"model": model.model_})
        model.class_weights_ = tuple(header["class_weights"])
        model.history_ = state["history"]
        return model
