"""Provenance-tagged image manifests stored as JSON lines."""

from __future__ import annotations

import json
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Iterable, Optional

PROVENANCES = ("real", "generated_phase1", "generated_phase2")
DIAGNOSES = ("nevus", "melanoma")
ARTIFACT_FLAGS = ("hair", "measure", "pen", "acral")


@dataclass(frozen=True)
class ManifestRecord:
    id: str
    path: str
    label_structure: Optional[bool] = None
    label_diagnosis: Optional[str] = None
    provenance: str = "real"
    source_id: Optional[str] = None
    artifact_flags: frozenset = field(default_factory=frozenset)
    pool: Optional[str] = None

    def __post_init__(self):
        if self.provenance not in PROVENANCES:
            raise ValueError(f"{self.id}: unknown provenance {self.provenance!r}")
        if self.label_diagnosis is not None and self.label_diagnosis not in DIAGNOSES:
            raise ValueError(f"{self.id}: unknown diagnosis {self.label_diagnosis!r}")
        if self.provenance == "generated_phase2" and not self.source_id:
            raise ValueError(f"{self.id}: phase-2 record without source_id")
        if self.provenance == "real" and self.source_id is not None:
            raise ValueError(f"{self.id}: real record with a source_id")
        flags = frozenset(self.artifact_flags)
        bad = flags - set(ARTIFACT_FLAGS)
        if bad:
            raise ValueError(f"{self.id}: unknown artifact flags {sorted(bad)}")
        object.__setattr__(self, "artifact_flags", flags)

    def to_json(self) -> dict:
        return {
            "id": self.id,
            "path": self.path,
            "label_structure": self.label_structure,
            "label_diagnosis": self.label_diagnosis,
            "provenance": self.provenance,
            "source_id": self.source_id,
            "artifact_flags": sorted(self.artifact_flags),
            "pool": self.pool,
        }

    @classmethod
    def from_json(cls, data: dict) -> "ManifestRecord":
        data = dict(data)
        data["artifact_flags"] = frozenset(data.get("artifact_flags") or ())
        return cls(**data)

    def with_(self, **changes) -> "ManifestRecord":
        return replace(self, **changes)


Manifest = list  # list[ManifestRecord]


def write_manifest(records: Iterable[ManifestRecord], path: str | Path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", encoding="utf-8") as fh:
        for rec in records:
            fh.write(json.dumps(rec.to_json(), sort_keys=True) + "\n")


def read_manifest(path: str | Path) -> list[ManifestRecord]:
    with Path(path).open(encoding="utf-8") as fh:
        return [ManifestRecord.from_json(json.loads(line)) for line in fh if line.strip()]


def index_by_id(records: Iterable[ManifestRecord]) -> dict[str, ManifestRecord]:
    out = {}
    for rec in records:
        if rec.id in out:
            raise ValueError(f"duplicate id {rec.id}")
        out[rec.id] = rec
    return out
