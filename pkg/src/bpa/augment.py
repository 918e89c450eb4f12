"""Training-time augmentation: random resized crop, horizontal flip and
RandAugment.

All randomness comes from the ``numpy.random.Generator`` passed in, so a
given generator state always yields the same output. The RandAugment op set
is limited to photometric and mild geometric ops; nothing that erases or
inverts the lesion.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from PIL import Image, ImageEnhance, ImageOps

from .imaging import from_uint8, to_uint8

MAX_MAGNITUDE = 10
FILL = (128, 128, 128)


@dataclass(frozen=True)
class AugmentPolicy:
    input_size: int = 240
    enabled: bool = True
    crop_scale: tuple = (0.5, 1.0)
    crop_ratio: tuple = (3 / 4, 4 / 3)
    flip_p: float = 0.5
    n_ops: int = 6
    magnitude: int = 8

    def __post_init__(self):
        if self.input_size <= 0:
            raise ValueError("input_size must be positive")
        lo, hi = self.crop_scale
        if not 0 < lo <= hi <= 1:
            raise ValueError(f"crop_scale must lie in (0, 1], got {self.crop_scale}")
        if self.n_ops < 0 or self.magnitude < 0 or int(self.n_ops) != self.n_ops or int(self.magnitude) != self.magnitude:
            raise ValueError("n_ops and magnitude must be nonnegative integers")


def _level(m: int, max_value: float) -> float:
    return m / MAX_MAGNITUDE * max_value


def _signed(v: float, rng) -> float:
    return v if rng.random() < 0.5 else -v


def _enhance(cls):
    def op(img, m, rng):
        return cls(img).enhance(1.0 + _signed(_level(m, 0.9), rng))

    return op


def _rotate(img, m, rng):
    return img.rotate(_signed(_level(m, 30.0), rng), resample=Image.BILINEAR, fillcolor=FILL)


def _shear_x(img, m, rng):
    s = _signed(_level(m, 0.3), rng)
    return img.transform(img.size, Image.AFFINE, (1, s, 0, 0, 1, 0), resample=Image.BILINEAR, fillcolor=FILL)


def _shear_y(img, m, rng):
    s = _signed(_level(m, 0.3), rng)
    return img.transform(img.size, Image.AFFINE, (1, 0, 0, s, 1, 0), resample=Image.BILINEAR, fillcolor=FILL)


def _translate_x(img, m, rng):
    t = _signed(_level(m, 0.2), rng) * img.size[0]
    return img.transform(img.size, Image.AFFINE, (1, 0, t, 0, 1, 0), resample=Image.BILINEAR, fillcolor=FILL)


def _translate_y(img, m, rng):
    t = _signed(_level(m, 0.2), rng) * img.size[1]
    return img.transform(img.size, Image.AFFINE, (1, 0, 0, 0, 1, t), resample=Image.BILINEAR, fillcolor=FILL)


def _posterize(img, m, rng):
    return ImageOps.posterize(img, 8 - int(_level(m, 4)))


OPS = {
    "identity": lambda img, m, rng: img,
    "autocontrast": lambda img, m, rng: ImageOps.autocontrast(img),
    "equalize": lambda img, m, rng: ImageOps.equalize(img),
    "brightness": _enhance(ImageEnhance.Brightness),
    "color": _enhance(ImageEnhance.Color),
    "contrast": _enhance(ImageEnhance.Contrast),
    "sharpness": _enhance(ImageEnhance.Sharpness),
    "posterize": _posterize,
    "rotate": _rotate,
    "shear_x": _shear_x,
    "shear_y": _shear_y,
    "translate_x": _translate_x,
    "translate_y": _translate_y,
}
OP_NAMES = tuple(OPS)


def random_resized_crop_box(width, height, scale, ratio, rng) -> tuple[int, int, int, int]:
    """(left, top, w, h) of a crop covering a random area fraction and aspect."""
    area = width * height
    log_ratio = (math.log(ratio[0]), math.log(ratio[1]))
    for _ in range(10):
        target = area * rng.uniform(scale[0], scale[1])
        aspect = math.exp(rng.uniform(*log_ratio))
        w = int(round(math.sqrt(target * aspect)))
        h = int(round(math.sqrt(target / aspect)))
        if 0 < w <= width and 0 < h <= height:
            left = int(rng.integers(0, width - w + 1))
            top = int(rng.integers(0, height - h + 1))
            return left, top, w, h
    # fall back to the largest centered crop within the ratio bounds
    in_ratio = width / height
    if in_ratio < ratio[0]:
        w, h = width, int(round(width / ratio[0]))
    elif in_ratio > ratio[1]:
        h, w = height, int(round(height * ratio[1]))
    else:
        w, h = width, height
    return (width - w) // 2, (height - h) // 2, w, h


def rand_augment(img: Image.Image, n_ops: int, magnitude: int, rng) -> Image.Image:
    for _ in range(n_ops):
        op = OPS[OP_NAMES[int(rng.integers(len(OP_NAMES)))]]
        img = op(img, magnitude, rng)
    return img


def augment(image: np.ndarray, policy: AugmentPolicy, rng: np.random.Generator) -> np.ndarray:
    """One augmented view of a ``[0, 1]`` image at ``policy.input_size``."""
    img = Image.fromarray(to_uint8(image), mode="RGB")
    size = (policy.input_size, policy.input_size)
    if not policy.enabled:
        return from_uint8(np.asarray(img.resize(size, Image.BILINEAR)))
    left, top, w, h = random_resized_crop_box(img.width, img.height, policy.crop_scale, policy.crop_ratio, rng)
    img = img.resize(size, Image.BILINEAR, box=(left, top, left + w, top + h))
    if rng.random() < policy.flip_p:
        img = img.transpose(Image.FLIP_LEFT_RIGHT)
    img = rand_augment(img, policy.n_ops, policy.magnitude, rng)
    return from_uint8(np.asarray(img))


def plain_resize(image: np.ndarray, input_size: int) -> np.ndarray:
    return augment(image, AugmentPolicy(input_size=input_size, enabled=False), np.random.default_rng(0))
