import numpy as np
import pytest
from PIL import Image

from bpa.imaging import (
    center_crop_resize,
    check_images,
    content_id,
    from_uint8,
    load_png,
    resize_batch,
    save_png,
    to_classifier_range,
    to_generator_range,
    to_uint8,
)


def test_range_round_trip():
    x = np.random.default_rng(0).random((2, 4, 4, 3)).astype(np.float32)
    assert np.allclose(to_classifier_range(to_generator_range(x)), x, atol=1e-6)
    u = to_uint8(x)
    assert u.dtype == np.uint8
    assert np.abs(from_uint8(u) - x).max() <= 0.5 / 255 + 1e-6
    assert np.array_equal(to_uint8(to_generator_range(x), (-1.0, 1.0)), u)


def test_check_images_validation():
    assert check_images(np.zeros((4, 4, 3))).shape == (1, 4, 4, 3)
    with pytest.raises(ValueError, match="square"):
        check_images(np.zeros((1, 4, 5, 3)))
    with pytest.raises(ValueError, match="outside"):
        check_images(np.full((1, 4, 4, 3), 2.0), value_range=(0.0, 1.0))
    with pytest.raises(ValueError, match="NaN"):
        check_images(np.full((1, 4, 4, 3), np.nan))
    with pytest.raises(ValueError, match="expected 8x8"):
        check_images(np.zeros((1, 4, 4, 3)), size=8)


def test_center_crop_resize_shape():
    img = Image.new("RGB", (60, 40), (10, 20, 30))
    out = center_crop_resize(img, 16)
    assert out.size == (16, 16) and out.mode == "RGB"


def test_png_round_trip_and_content_id(tmp_path):
    px = (np.random.default_rng(1).random((8, 8, 3)) * 255).astype(np.uint8)
    save_png(px, tmp_path / "a.png")
    assert np.array_equal(load_png(tmp_path / "a.png"), px)
    rid = content_id(px)
    assert len(rid) == 16 and int(rid, 16) >= 0
    assert content_id(px) == rid
    assert content_id(px, "generated_phase1") != rid


def test_resize_batch():
    X = np.random.default_rng(0).random((3, 8, 8, 3)).astype(np.float32)
    assert resize_batch(X, 16).shape == (3, 16, 16, 3)
    assert resize_batch(X, 8) is X or np.array_equal(resize_batch(X, 8), X)
