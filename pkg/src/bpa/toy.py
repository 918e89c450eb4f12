"""Procedural stand-in for dermoscopy data.

Plain brown blobs on a skin-toned background play the nevus role; a dark
mesh drawn inside the blob plays the atypical pigment network. Toy
melanomas have ragged borders and blue-grey blotches and usually carry the
mesh. Everything is rendered at twice the requested size and downsampled.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from PIL import Image

from .imaging import save_png, to_uint8


@dataclass
class LesionParams:
    grid: bool = False
    irregular: bool = False
    hair: bool = False


def _coords(size: int):
    ax = (np.arange(size) + 0.5) / size * 2.0 - 1.0
    return np.meshgrid(ax, ax, indexing="xy")


def render_lesion(rng: np.random.Generator, size: int, params: LesionParams) -> np.ndarray:
    """One toy lesion in ``[0, 1]``, ``size x size x 3``."""
    big = size * 2
    x, y = _coords(big)
    skin = np.array([0.86, 0.68, 0.58]) + rng.normal(0, 0.04, 3)
    shade = 1.0 + 0.06 * (rng.normal() * x + rng.normal() * y)
    img = np.clip(skin, 0, 1)[None, None, :] * shade[..., None]

    cx, cy = rng.uniform(-0.2, 0.2, 2)
    rx, ry = rng.uniform(0.38, 0.68, 2)
    theta = rng.uniform(0, np.pi)
    u = (x - cx) * np.cos(theta) + (y - cy) * np.sin(theta)
    v = -(x - cx) * np.sin(theta) + (y - cy) * np.cos(theta)
    r = np.sqrt((u / rx) ** 2 + (v / ry) ** 2)
    if params.irregular:
        phi = np.arctan2(v, u)
        wobble = sum(
            rng.uniform(0.06, 0.16) * np.cos(k * phi + rng.uniform(0, 2 * np.pi)) for k in (3, 5, 7)
        )
        r = r * (1.0 + wobble)
    mask = 1.0 / (1.0 + np.exp((r - 1.0) * 14.0))

    tone = np.array([0.50, 0.32, 0.22]) + rng.normal(0, 0.05, 3)
    depth = rng.uniform(0.15, 0.35)
    lesion = np.clip(tone, 0.05, 1)[None, None, :] * (1.0 - depth * np.clip(1.0 - r, 0, 1))[..., None]
    if params.irregular:
        blotch = np.zeros_like(r)
        for _ in range(rng.integers(2, 4)):
            bx, by = rng.uniform(-0.4, 0.4, 2)
            blotch += np.exp(-(((u - bx) ** 2 + (v - by) ** 2) / rng.uniform(0.02, 0.06)))
        veil = np.array([0.35, 0.40, 0.55])
        w = np.clip(blotch, 0, 0.8)[..., None]
        lesion = lesion * (1 - w) + veil[None, None, :] * w
    img = img * (1 - mask[..., None]) + lesion * mask[..., None]

    if params.grid:
        # mesh period 5-7 px at the target size, roughly axis-aligned
        period = rng.uniform(5.0, 7.0) / size * 2.0
        ang = rng.uniform(-np.pi / 12, np.pi / 12)
        gu = x * np.cos(ang) + y * np.sin(ang)
        gv = -x * np.sin(ang) + y * np.cos(ang)
        line = np.maximum(
            np.cos(np.pi * gu / period + rng.uniform(0, np.pi)) ** 6,
            np.cos(np.pi * gv / period + rng.uniform(0, np.pi)) ** 6,
        )
        strength = rng.uniform(0.35, 0.6)
        inner = 1.0 / (1.0 + np.exp((r - 0.85) * 14.0))
        img = img * (1.0 - strength * (line * inner)[..., None])

    if params.hair:
        for _ in range(rng.integers(1, 4)):
            a, b = rng.uniform(-1, 1, 2)
            ang = rng.uniform(0, np.pi)
            curve = rng.normal(0, 0.3)
            d = (x - a) * np.sin(ang) - (y - b) * np.cos(ang) + curve * ((x - a) * np.cos(ang)) ** 2
            hair = np.exp(-((d / 0.02) ** 2))
            img = img * (1.0 - 0.75 * hair[..., None])

    img = img + rng.normal(0, 0.015, img.shape)
    img = np.clip(img, 0, 1)
    small = Image.fromarray(to_uint8(img), mode="RGB").resize((size, size), Image.LANCZOS)
    return np.asarray(small, dtype=np.float32) / 255.0


def render_batch(n: int, size: int, seed: int, **params) -> np.ndarray:
    rng = np.random.default_rng(seed)
    if n == 0:
        return np.zeros((0, size, size, 3), dtype=np.float32)
    return np.stack([render_lesion(rng, size, LesionParams(**params)) for _ in range(n)]).astype(np.float32)


def grid_energy(images: np.ndarray) -> np.ndarray:
    """Mean absolute 4-neighbour Laplacian of luminance, per image.

    Mesh lines raise it; smooth blobs keep it low. Accepts either range
    convention since it is scale-equivariant.
    """
    images = np.asarray(images, dtype=np.float64)
    lum = images.mean(axis=-1)
    lap = (
        4 * lum[:, 1:-1, 1:-1]
        - lum[:, :-2, 1:-1]
        - lum[:, 2:, 1:-1]
        - lum[:, 1:-1, :-2]
        - lum[:, 1:-1, 2:]
    )
    return np.abs(lap).mean(axis=(1, 2))


def dark_border_fraction(image: np.ndarray, ring: int = 2, threshold: float = 0.35) -> float:
    """Fraction of border-ring pixels much darker than the median border tone."""
    lum = np.asarray(image, dtype=np.float64).mean(axis=-1)
    border = np.concatenate(
        [lum[:ring].ravel(), lum[-ring:].ravel(), lum[:, :ring].ravel(), lum[:, -ring:].ravel()]
    )
    return float(np.mean(border < np.median(border) * (1 - threshold)))


def flag_hair(image: np.ndarray) -> bool:
    """Toy-only heuristic: hairs cross the otherwise uniform skin border."""
    return dark_border_fraction(image) > 0.02


def _write_dir(images: np.ndarray, out: Path, prefix: str, flags: list | None = None) -> None:
    out.mkdir(parents=True, exist_ok=True)
    sidecar = {}
    for i, img in enumerate(images):
        name = f"{prefix}_{i:05d}.png"
        save_png(to_uint8(img), out / name)
        if flags is not None and flags[i]:
            sidecar[name] = {"artifact_flags": flags[i]}
    if flags is not None:
        (out / "artifacts.json").write_text(json.dumps(sidecar, indent=1, sort_keys=True), encoding="utf-8")


def write_toy_corpus(root: str | Path, sizes: dict, resolution: int, seed: int) -> dict[str, Path]:
    """Write every toy pool as a directory of PNGs.

    ``sizes`` keys: ``nevus``, ``nevus_artifact``, ``apn``, ``diag_nevus``,
    ``diag_melanoma``, ``test_pos``, ``test_neg``, ``val_pos``, ``val_neg``,
    ``grade_test_nevus``, ``grade_test_melanoma``.
    """
    root = Path(root)
    ss = np.random.SeedSequence(seed)
    seeds = iter(int(s.generate_state(1)[0]) for s in ss.spawn(16))
    dirs = {}

    clean = render_batch(sizes["nevus"], resolution, next(seeds))
    hairy = render_batch(sizes["nevus_artifact"], resolution, next(seeds), hair=True)
    order = np.random.default_rng(next(seeds)).permutation(len(clean) + len(hairy))
    nevi = np.concatenate([clean, hairy])[order]
    flags = [["hair"] if i >= len(clean) else [] for i in order]
    dirs["nevus"] = root / "nevus"
    _write_dir(nevi, dirs["nevus"], "nevus", flags)

    dirs["apn"] = root / "apn"
    _write_dir(render_batch(sizes["apn"], resolution, next(seeds), grid=True), dirs["apn"], "apn")

    for split in ("diag", "grade_test"):
        n_nev, n_mel = sizes[f"{split}_nevus"], sizes[f"{split}_melanoma"]
        rng = np.random.default_rng(next(seeds))
        # a minority of nevi carry the mesh; most melanomas do
        nev = [render_lesion(rng, resolution, LesionParams(grid=rng.random() < 0.1)) for _ in range(n_nev)]
        mel = [
            render_lesion(rng, resolution, LesionParams(grid=rng.random() < 0.7, irregular=True))
            for _ in range(n_mel)
        ]
        dirs[f"{split}_nevus"] = root / split / "nevus"
        dirs[f"{split}_melanoma"] = root / split / "melanoma"
        _write_dir(np.stack(nev), dirs[f"{split}_nevus"], "nev")
        _write_dir(np.stack(mel), dirs[f"{split}_melanoma"], "mel")

    for split in ("test", "val"):
        dirs[f"{split}_pos"] = root / split / "pos"
        dirs[f"{split}_neg"] = root / split / "neg"
        _write_dir(render_batch(sizes[f"{split}_pos"], resolution, next(seeds), grid=True), dirs[f"{split}_pos"], "pos")
        _write_dir(render_batch(sizes[f"{split}_neg"], resolution, next(seeds)), dirs[f"{split}_neg"], "neg")
    return dirs
