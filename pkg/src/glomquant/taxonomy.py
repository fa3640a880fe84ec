"""Five-class glomerular label system, hierarchy gates and binary merge rules."""

import csv
import enum
import math
from collections import Counter
from dataclasses import dataclass, field
from typing import NamedTuple, Optional

from .errors import FormatError


class GlomClass(enum.Enum):
    NORMAL = "normal"
    OBSOLESCENT = "obsolescent"
    SOLIDIFIED = "solidified"
    DISAPPEARING = "disappearing"
    NON_GLOMERULAR = "non_glomerular"

    @property
    def index(self) -> int:
        return CLASS_ORDER.index(self)

    @classmethod
    def from_index(cls, i: int) -> "GlomClass":
        return CLASS_ORDER[i]

    @classmethod
    def parse(cls, text: str) -> "GlomClass":
        try:
            return cls(text)
        except ValueError:
            raise FormatError(f"unknown class label {text!r}", field="label") from None

    @property
    def short(self) -> str:
        return _SHORT[self]


# Probability vectors everywhere follow this order.
CLASS_ORDER = (
    GlomClass.NORMAL,
    GlomClass.OBSOLESCENT,
    GlomClass.SOLIDIFIED,
    GlomClass.DISAPPEARING,
    GlomClass.NON_GLOMERULAR,
)
NUM_CLASSES = len(CLASS_ORDER)

_SHORT = {
    GlomClass.NORMAL: "Normal",
    GlomClass.OBSOLESCENT: "O-GGS",
    GlomClass.SOLIDIFIED: "S-GGS",
    GlomClass.DISAPPEARING: "D-GGS",
    GlomClass.NON_GLOMERULAR: "NonGlom",
}

GGS_CLASSES = frozenset(
    {GlomClass.OBSOLESCENT, GlomClass.SOLIDIFIED, GlomClass.DISAPPEARING}
)


class Binary(enum.Enum):
    POSITIVE = "positive"
    NEGATIVE = "negative"
    DROPPED = "dropped"


def to_binary(label: GlomClass) -> Binary:
    """Sclerosed subtypes are positive, normal is negative, non-glomerular is discarded."""
    if label in GGS_CLASSES:
        return Binary.POSITIVE
    if label is GlomClass.NORMAL:
        return Binary.NEGATIVE
    return Binary.DROPPED


class Hierarchy(NamedTuple):
    is_glomerulus: bool
    is_ggs: Optional[bool]
    fine: Optional[GlomClass]


def hierarchy(label: GlomClass) -> Hierarchy:
    """Decompose a label into the three sequential decisions.

    ``None`` marks a gate that does not apply (e.g. GGS status of a
    non-glomerular patch).
    """
    if label is GlomClass.NON_GLOMERULAR:
        return Hierarchy(False, None, None)
    if label is GlomClass.NORMAL:
        return Hierarchy(True, False, None)
    return Hierarchy(True, True, label)


@dataclass(frozen=True)
class ManifestEntry:
    patch_id: str
    patient_id: str
    wsi_id: str
    label: GlomClass


@dataclass
class DatasetManifest:
    entries: list = field(default_factory=list)

    def __post_init__(self):
        for e in self.entries:
            if not e.patient_id:
                raise FormatError(f"entry {e.patch_id!r} has no patient id", field="patient_id")

    def __len__(self):
        return len(self.entries)

    @property
    def counts(self) -> dict:
        tally = Counter(e.label for e in self.entries)
        return {c: tally.get(c, 0) for c in CLASS_ORDER}

    @property
    def patients(self) -> list:
        return sorted({e.patient_id for e in self.entries})

    @classmethod
    def read_csv(cls, path) -> "DatasetManifest":
        with open(path, newline="", encoding="utf-8") as fh:
            reader = csv.DictReader(fh)
            expected = ["patch_id", "patient_id", "wsi_id", "label"]
            if reader.fieldnames != expected:
                raise FormatError(
                    f"expected header {','.join(expected)}, got {reader.fieldnames}",
                    field="header",
                )
            entries = [
                ManifestEntry(
                    row["patch_id"], row["patient_id"], row["wsi_id"], GlomClass.parse(row["label"])
                )
                for row in reader
            ]
        return cls(entries)

    def write_csv(self, path) -> None:
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["patch_id", "patient_id", "wsi_id", "label"])
            for e in self.entries:
                w.writerow([e.patch_id, e.patient_id, e.wsi_id, e.label.value])


def round_half_up(x: float) -> int:
    return int(math.floor(x + 0.5))


def class_distribution(manifest) -> dict:
    """Per-class counts and integer percentages.

    Accepts a :class:`DatasetManifest` or a plain ``{GlomClass: count}``
    mapping. Returns ``{"counts": ..., "percent": ..., "total": n}``; an
    empty manifest gives empty mappings and a zero total.
    """
    counts = manifest.counts if isinstance(manifest, DatasetManifest) else dict(manifest)
    total = sum(counts.values())
    if total == 0:
        return {"counts": {}, "percent": {}, "total": 0}
    counts = {c: counts.get(c, 0) for c in CLASS_ORDER if counts.get(c, 0) > 0}
    percent = {c: round_half_up(100.0 * n / total) for c, n in counts.items()}
    return {"counts": counts, "percent": percent, "total": total}


# Cohort used for the classifier (patch counts per class).
REFERENCE_COHORT_COUNTS = {
    GlomClass.NORMAL: 3617,
    GlomClass.OBSOLESCENT: 6647,
    GlomClass.SOLIDIFIED: 735,
    GlomClass.DISAPPEARING: 459,
    GlomClass.NON_GLOMERULAR: 10619,
}

# Default phantom class mix, close to the reference cohort percentages.
DEFAULT_CLASS_MIX = {
    GlomClass.NORMAL: 0.16,
    GlomClass.OBSOLESCENT: 0.30,
    GlomClass.SOLIDIFIED: 0.03,
    GlomClass.DISAPPEARING: 0.02,
    GlomClass.NON_GLOMERULAR: 0.49,
}
