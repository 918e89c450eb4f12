"""Pool ingestion, artifact filtering and training-condition assembly."""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Mapping, Optional

import numpy as np
import yaml
from PIL import Image, UnidentifiedImageError

from .imaging import center_crop_resize, content_id, save_png
from .manifest import ManifestRecord

logger = logging.getLogger(__name__)

IMAGE_SUFFIXES = {".png", ".jpg", ".jpeg", ".bmp", ".tif", ".tiff"}

POOLS = ("nevus", "nevusG", "APN", "APN_nevus", "APN_nevusG")
POSITIVE_POOLS = frozenset({"APN", "APN_nevus", "APN_nevusG"})
REAL_POOLS = frozenset({"nevus", "APN"})
GENERATED_POOLS = frozenset({"nevusG", "APN_nevus", "APN_nevusG"})

CONDITION_COUNTS = {
    "A": {"nevus": 10000, "APN": 230},
    "B": {"nevus": 10000, "APN": 230, "APN_nevus": 10000},
    "C": {"nevus": 10000, "APN": 230, "APN_nevusG": 10000},
    "D": {"nevus": 10000, "APN": 230, "nevusG": 10000, "APN_nevusG": 20000},
}
CONDITION_NAMES = {"A": "baseline", "B": "CycleGAN", "C": "simplified BPA", "D": "BPA"}


@dataclass(frozen=True)
class TrainingCondition:
    condition_id: str
    counts: Mapping[str, int]

    @property
    def total(self) -> int:
        return sum(self.counts.values())

    @property
    def n_positive(self) -> int:
        return sum(n for pool, n in self.counts.items() if pool in POSITIVE_POOLS)


def scaled_count(n: int, scale: float) -> int:
    """Round half up, never below one."""
    return max(1, int(np.floor(n * scale + 0.5)))


def training_condition(condition_id: str, scale: float = 1.0) -> TrainingCondition:
    if condition_id not in CONDITION_COUNTS:
        raise ValueError(f"unknown condition {condition_id!r}; expected one of {sorted(CONDITION_COUNTS)}")
    counts = CONDITION_COUNTS[condition_id]
    if scale != 1.0:
        counts = {pool: scaled_count(n, scale) for pool, n in counts.items()}
    return TrainingCondition(condition_id, dict(counts))


def structure_label(pool: str) -> bool:
    if pool not in POOLS:
        raise ValueError(f"unknown pool {pool!r}")
    return pool in POSITIVE_POOLS


@dataclass
class LabelSpec:
    """Labels applied to every image of an ingested directory.

    ``sidecar`` names a JSON object mapping file names to per-file overrides
    (``artifact_flags``, ``label_structure``, ``label_diagnosis``).
    """

    label_structure: Optional[bool] = None
    label_diagnosis: Optional[str] = None
    pool: Optional[str] = None
    sidecar: Optional[str] = None
    per_file: dict = field(default_factory=dict)

    @classmethod
    def from_file(cls, path: str | Path) -> "LabelSpec":
        path = Path(path)
        data = yaml.safe_load(path.read_text(encoding="utf-8")) or {}
        spec = cls(**{k: v for k, v in data.items() if k != "per_file"})
        if spec.sidecar and not Path(spec.sidecar).is_absolute():
            spec.sidecar = str(path.parent / spec.sidecar)
        return spec

    def overrides(self) -> dict:
        merged = {}
        if self.sidecar:
            merged.update(json.loads(Path(self.sidecar).read_text(encoding="utf-8")))
        merged.update(self.per_file)
        return merged


def ingest(directory: str | Path, labels: LabelSpec, target_resolution: int, out_dir: str | Path) -> list[ManifestRecord]:
    """Center-crop, resize and re-encode every decodable image under ``directory``.

    Undecodable files are skipped with a warning. Ids are content hashes of
    the resized pixels, so re-ingesting a directory reproduces them; exact
    duplicate images collapse to one record.
    """
    directory = Path(directory)
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    overrides = labels.overrides()
    records: list[ManifestRecord] = []
    seen: set[str] = set()
    files = sorted(p for p in directory.rglob("*") if p.is_file() and p.suffix.lower() in IMAGE_SUFFIXES)
    for path in files:
        try:
            with Image.open(path) as img:
                pixels = np.asarray(center_crop_resize(img, target_resolution), dtype=np.uint8)
        except (UnidentifiedImageError, OSError) as exc:
            logger.warning("skipping undecodable %s: %s", path, exc)
            continue
        rid = content_id(pixels)
        if rid in seen:
            logger.warning("skipping duplicate image %s", path)
            continue
        seen.add(rid)
        extra = overrides.get(path.name, {})
        dst = out_dir / f"{rid}.png"
        save_png(pixels, dst)
        records.append(
            ManifestRecord(
                id=rid,
                path=str(dst),
                label_structure=extra.get("label_structure", labels.label_structure),
                label_diagnosis=extra.get("label_diagnosis", labels.label_diagnosis),
                provenance="real",
                artifact_flags=frozenset(extra.get("artifact_flags", ())),
                pool=labels.pool,
            )
        )
    return records


def filter_artifacts(records: list[ManifestRecord], excluded_flags) -> list[ManifestRecord]:
    excluded = frozenset(excluded_flags)
    return [r for r in records if not (r.artifact_flags & excluded)]


def build_condition(
    condition: TrainingCondition,
    pools: Mapping[str, list[ManifestRecord]],
    seed: int,
    top_up: Optional[Callable[[str, int], list[ManifestRecord]]] = None,
) -> list[ManifestRecord]:
    """Sample each pool without replacement and attach structure labels.

    Real pools smaller than required are a hard error. Generated pools may be
    extended through ``top_up(pool_name, n_missing)`` when given.
    """
    rng = np.random.default_rng(seed)
    out: list[ManifestRecord] = []
    for pool in POOLS:
        need = condition.counts.get(pool, 0)
        if not need:
            continue
        have = list(pools.get(pool, ()))
        if len(have) < need and top_up is not None and pool in GENERATED_POOLS:
            have += top_up(pool, need - len(have))
        if len(have) < need:
            raise ValueError(f"insufficient pool: {pool} (need {need}, have {len(have)})")
        have.sort(key=lambda r: r.id)
        picked = rng.choice(len(have), size=need, replace=False)
        label = structure_label(pool)
        out.extend(have[i].with_(label_structure=label, pool=pool) for i in sorted(picked))
    ids = [r.id for r in out]
    if len(set(ids)) != len(ids):
        raise ValueError("condition contains a duplicated id across pools")
    return out


def pool_counts(records: list[ManifestRecord]) -> dict[str, int]:
    counts: dict[str, int] = {}
    for r in records:
        counts[r.pool] = counts.get(r.pool, 0) + 1
    return counts
