"""7-point checklist scoring.

Each dermoscopic structure is kept as its own flag so per-structure detectors
can fill them independently; the major/minor counts are derived.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, fields

MAJOR_CRITERIA = (
    "atypical_pigment_network",
    "blue_whitish_veil",
    "atypical_vascular_pattern",
)
MINOR_CRITERIA = (
    "irregular_streaks",
    "irregular_pigmentation",
    "irregular_dots_globules",
    "regression_structures",
)
MAJOR_WEIGHT = 2
MINOR_WEIGHT = 1
MALIGNANCY_THRESHOLD = 3


@dataclass(frozen=True)
class ChecklistAssessment:
    atypical_pigment_network: bool = False
    blue_whitish_veil: bool = False
    atypical_vascular_pattern: bool = False
    irregular_streaks: bool = False
    irregular_pigmentation: bool = False
    irregular_dots_globules: bool = False
    regression_structures: bool = False

    @property
    def n_major(self) -> int:
        return sum(bool(getattr(self, name)) for name in MAJOR_CRITERIA)

    @property
    def n_minor(self) -> int:
        return sum(bool(getattr(self, name)) for name in MINOR_CRITERIA)

    def to_dict(self) -> dict[str, bool]:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: dict) -> "ChecklistAssessment":
        names = {f.name for f in fields(cls)}
        unknown = set(data) - names
        if unknown:
            raise ValueError(f"unknown checklist fields: {sorted(unknown)}")
        return cls(**{k: bool(v) for k, v in data.items()})


def total_score(a: ChecklistAssessment) -> int:
    """Weighted count of present structures, in [0, 10]."""
    return a.n_major * MAJOR_WEIGHT + a.n_minor * MINOR_WEIGHT


def is_malignant(a: ChecklistAssessment) -> bool:
    return total_score(a) >= MALIGNANCY_THRESHOLD
