"""Image tensors, range conventions and PNG I/O.

Images are ``H x W x 3`` float32 arrays. Generators work in ``[-1, 1]``,
classifiers in ``[0, 1]``; on disk everything is 8-bit RGB PNG.
"""

from __future__ import annotations

import hashlib
import io
from pathlib import Path

import numpy as np
from PIL import Image

GENERATOR_RANGE = (-1.0, 1.0)
CLASSIFIER_RANGE = (0.0, 1.0)


def to_generator_range(x: np.ndarray) -> np.ndarray:
    return (np.asarray(x, dtype=np.float32) * 2.0 - 1.0).astype(np.float32)


def to_classifier_range(x: np.ndarray) -> np.ndarray:
    return ((np.asarray(x, dtype=np.float32) + 1.0) / 2.0).astype(np.float32)


def to_uint8(x: np.ndarray, value_range: tuple[float, float] = CLASSIFIER_RANGE) -> np.ndarray:
    lo, hi = value_range
    x = (np.asarray(x, dtype=np.float32) - lo) / (hi - lo)
    return np.clip(np.rint(x * 255.0), 0, 255).astype(np.uint8)


def from_uint8(x: np.ndarray, value_range: tuple[float, float] = CLASSIFIER_RANGE) -> np.ndarray:
    lo, hi = value_range
    return (np.asarray(x, dtype=np.float32) / 255.0 * (hi - lo) + lo).astype(np.float32)


def check_images(X, *, value_range: tuple[float, float] | None = None, size: int | None = None) -> np.ndarray:
    """Validate an ``(n, H, W, 3)`` batch and return it as float32."""
    X = np.asarray(X, dtype=np.float32)
    if X.ndim == 3:
        X = X[None]
    if X.ndim != 4 or X.shape[-1] != 3:
        raise ValueError(f"expected images shaped (n, H, W, 3), got {X.shape}")
    if X.shape[1] != X.shape[2]:
        raise ValueError(f"expected square images, got {X.shape[1]}x{X.shape[2]}")
    if size is not None and X.shape[1] != size:
        raise ValueError(f"expected {size}x{size} images, got {X.shape[1]}x{X.shape[2]}")
    if not np.isfinite(X).all():
        raise ValueError("images contain NaN or Inf")
    if value_range is not None and X.size:
        lo, hi = value_range
        if X.min() < lo - 1e-6 or X.max() > hi + 1e-6:
            raise ValueError(f"pixel values outside {value_range}")
    return X


def center_crop_resize(img: Image.Image, size: int) -> Image.Image:
    """Crop the largest centered square, then scale to ``size``."""
    img = img.convert("RGB")
    w, h = img.size
    side = min(w, h)
    left = (w - side) // 2
    top = (h - side) // 2
    img = img.crop((left, top, left + side, top + side))
    if side != size:
        img = img.resize((size, size), Image.LANCZOS)
    return img


def content_id(pixels: np.ndarray, namespace: str = "") -> str:
    h = hashlib.sha256()
    h.update(namespace.encode())
    h.update(str(pixels.shape).encode())
    h.update(np.ascontiguousarray(pixels).tobytes())
    return h.hexdigest()[:16]


def png_bytes(pixels: np.ndarray) -> bytes:
    buf = io.BytesIO()
    Image.fromarray(pixels, mode="RGB").save(buf, format="PNG")
    return buf.getvalue()


def save_png(pixels: np.ndarray, path: str | Path) -> None:
    Path(path).write_bytes(png_bytes(pixels))


def load_png(path: str | Path) -> np.ndarray:
    with Image.open(path) as img:
        return np.asarray(img.convert("RGB"), dtype=np.uint8)


def load_images(paths, value_range: tuple[float, float] = CLASSIFIER_RANGE) -> np.ndarray:
    arrays = [from_uint8(load_png(p), value_range) for p in paths]
    if not arrays:
        return np.zeros((0, 0, 0, 3), dtype=np.float32)
    return np.stack(arrays)


def resize_batch(X: np.ndarray, size: int) -> np.ndarray:
    """Bilinear resize of a ``[0, 1]`` batch; no-op at matching size."""
    if X.shape[1] == size:
        return X
    out = np.empty((X.shape[0], size, size, 3), dtype=np.float32)
    for i, x in enumerate(X):
        img = Image.fromarray(to_uint8(x), mode="RGB").resize((size, size), Image.BILINEAR)
        out[i] = from_uint8(np.asarray(img))
    return out
