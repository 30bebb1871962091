"""
Domain types shared by the scoring and analysis modules.

Class, stratum and attribute orderings are frozen here; CSV columns,
confusion-matrix axes and report rows all derive from these definitions.
All types are immutable after construction.
"""

import math
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import Any, Iterator

import numpy as np

from lesion_bench.errors import (
    DuplicateImageId,
    InvalidProbability,
    UnknownMetric,
    ValidationError,
)

DEFAULT_THRESHOLD = 0.65

# Lesion attribute names of the public 2018 challenge data release. The
# evaluation protocol only says there are five; manifests may override.
DEFAULT_ATTRIBUTE_NAMES = (
    "globules",
    "milia_like_cyst",
    "negative_network",
    "pigment_network",
    "streaks",
)

DEFAULT_NAMING = {
    "segmentation": "{image_id}_segmentation.png",
    "attribute": "{image_id}_attribute_{attribute}.png",
}

MANIFEST_SCHEMA_VERSION = 1


class DiagnosisClass(str, Enum):
    MEL = "MEL"
    NV = "NV"
    BCC = "BCC"
    AKIEC = "AKIEC"
    BKL = "BKL"
    DF = "DF"
    VASC = "VASC"

    @property
    def position(self) -> int:
        return DIAGNOSIS_CLASSES.index(self)


DIAGNOSIS_CLASSES: tuple[DiagnosisClass, ...] = tuple(DiagnosisClass)


class SegStratum(str, Enum):
    MEL = "MEL"
    SEBK = "SEBK"
    NEVI = "NEVI"
    OTHER = "OTHER"


class Partition(str, Enum):
    INTERNAL = "INTERNAL"
    EXTERNAL = "EXTERNAL"


class Task(str, Enum):
    SEGMENTATION = "segmentation"
    ATTRIBUTES = "attributes"
    CLASSIFICATION = "classification"


@dataclass(frozen=True)
class Flag:
    """A non-fatal diagnostic attached to a result or report."""

    code: str
    message: str
    image_id: str | None = None

    def to_dict(self) -> dict[str, Any]:
        return {"code": self.code, "message": self.message, "image_id": self.image_id}

    @classmethod
    def from_dict(cls, data: dict[str, Any]) -> "Flag":
        return cls(code=data["code"], message=data["message"], image_id=data.get("image_id"))


@dataclass(frozen=True, eq=False)
class BinaryMask:
    """
    A rasterized region. ``bits`` is a read-only boolean array of shape
    (height, width), row-major, True = foreground.
    """

    bits: np.ndarray

    def __post_init__(self):
        bits = np.array(self.bits, dtype=bool, copy=True)
        if bits.ndim != 2 or bits.shape[0] < 1 or bits.shape[1] < 1:
            raise ValidationError(f"Mask must be a non-empty 2-D grid, got shape {bits.shape}")
        bits.flags.writeable = False
        object.__setattr__(self, "bits", bits)

    @classmethod
    def empty(cls, width: int, height: int) -> "BinaryMask":
        return cls(np.zeros((height, width), dtype=bool))

    @property
    def width(self) -> int:
        return self.bits.shape[1]

    @property
    def height(self) -> int:
        return self.bits.shape[0]

    @property
    def shape(self) -> tuple[int, int]:
        return self.bits.shape

    @property
    def foreground(self) -> int:
        return int(np.count_nonzero(self.bits))

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, BinaryMask):
            return NotImplemented
        return self.shape == other.shape and bool(np.array_equal(self.bits, other.bits))

    def __hash__(self) -> int:
        return hash((self.shape, self.bits.tobytes()))


@dataclass(frozen=True)
class PixelCounts:
    tp: int = 0
    fp: int = 0
    fn_: int = 0
    tn: int = 0

    def __post_init__(self):
        for name in ("tp", "fp", "fn_", "tn"):
            value = getattr(self, name)
            if isinstance(value, bool) or int(value) != value or value < 0:
                raise ValidationError(f"PixelCounts.{name} must be a non-negative integer, got {value!r}")
            object.__setattr__(self, name, int(value))

    def __add__(self, other: "PixelCounts") -> "PixelCounts":
        if not isinstance(other, PixelCounts):
            return NotImplemented
        return PixelCounts(
            tp=self.tp + other.tp,
            fp=self.fp + other.fp,
            fn_=self.fn_ + other.fn_,
            tn=self.tn + other.tn,
        )

    @property
    def total(self) -> int:
        return self.tp + self.fp + self.fn_ + self.tn

    def to_dict(self) -> dict[str, int]:
        return {"tp": self.tp, "fp": self.fp, "fn": self.fn_, "tn": self.tn}

    @classmethod
    def from_dict(cls, data: dict[str, int]) -> "PixelCounts":
        return cls(tp=data["tp"], fp=data["fp"], fn_=data["fn"], tn=data["tn"])


@dataclass(frozen=True)
class PredictionRecord:
    image_id: str
    probs: tuple[float, ...]

    def __post_init__(self):
        probs = tuple(float(p) for p in self.probs)
        if len(probs) != len(DIAGNOSIS_CLASSES):
            raise InvalidProbability(
                f"{self.image_id}: expected {len(DIAGNOSIS_CLASSES)} probabilities, got {len(probs)}"
            )
        for cls, p in zip(DIAGNOSIS_CLASSES, probs):
            if not math.isfinite(p) or p < 0.0 or p > 1.0:
                raise InvalidProbability(
                    f"{self.image_id}: probability for {cls.value} must be finite and in [0, 1], got {p!r}"
                )
        object.__setattr__(self, "probs", probs)

    def prob(self, cls: DiagnosisClass) -> float:
        return self.probs[cls.position]


@dataclass(frozen=True)
class ManifestEntry:
    """
    One ground-truth row. ``masks`` holds the segmentation mask path, or one
    path per attribute in the manifest's attribute order. ``label`` and
    ``partition`` are set for classification only, ``stratum`` for
    segmentation only.
    """

    image_id: str
    masks: tuple[Path, ...] = ()
    stratum: SegStratum | None = None
    label: DiagnosisClass | None = None
    partition: Partition | None = None


@dataclass(frozen=True)
class DatasetManifest:
    task: Task
    entries: tuple[ManifestEntry, ...]
    attribute_names: tuple[str, ...] = ()
    threshold: float = DEFAULT_THRESHOLD
    naming: dict[str, str] = field(default_factory=lambda: dict(DEFAULT_NAMING))
    digest: str = ""

    def __post_init__(self):
        seen = set()
        for entry in self.entries:
            if entry.image_id in seen:
                raise DuplicateImageId(f"Duplicate image id: {entry.image_id}")
            seen.add(entry.image_id)

        if self.task is Task.ATTRIBUTES and len(self.attribute_names) == 0:
            raise ValidationError("Attributes manifest needs at least one attribute name")

        object.__setattr__(self, "entries", tuple(self.entries))
        object.__setattr__(self, "_by_id", {e.image_id: e for e in self.entries})
        object.__setattr__(self, "attribute_names", tuple(self.attribute_names))

    def __len__(self) -> int:
        return len(self.entries)

    def __iter__(self) -> Iterator[ManifestEntry]:
        return iter(self.sorted_entries())

    def sorted_entries(self) -> list[ManifestEntry]:
        return sorted(self.entries, key=lambda e: e.image_id)

    def image_ids(self) -> list[str]:
        """Image ids in ascending order, the fixed scoring order."""
        return sorted(e.image_id for e in self.entries)

    def entry(self, image_id: str) -> ManifestEntry:
        return self._by_id[image_id]

    def __contains__(self, image_id: object) -> bool:
        return image_id in self._by_id

    def ids_in_partition(self, partition: Partition) -> list[str]:
        return sorted(e.image_id for e in self.entries if e.partition is partition)

    def ids_in_stratum(self, stratum: SegStratum) -> list[str]:
        return sorted(e.image_id for e in self.entries if e.stratum is stratum)

    def partition_counts(self) -> dict[Partition, int]:
        return {p: len(self.ids_in_partition(p)) for p in Partition}

    def mask_filename(self, image_id: str, attribute: str | None = None) -> str:
        if attribute is None:
            return self.naming["segmentation"].format(image_id=image_id)
        return self.naming["attribute"].format(image_id=image_id, attribute=attribute)


@dataclass(frozen=True)
class SubmissionScore:
    """
    One submission's metric bundle. ``aggregates`` holds whole-test-set values;
    ``scopes`` holds the same metric names per stratum (segmentation) or per
    partition plus the GAP scope (classification). Undefined values are None.
    """

    submission_id: str
    task: Task
    aggregates: dict[str, float | None]
    scopes: dict[str, dict[str, float | None]] = field(default_factory=dict)
    per_image: dict[str, dict[str, Any]] = field(default_factory=dict)
    flags: tuple[Flag, ...] = ()

    def metric(self, name: str) -> float:
        """
        Resolve ``bacc`` against the aggregates and ``INTERNAL.bacc`` against a
        scope. Missing or undefined values raise UnknownMetric.
        """
        scope, _, metric_name = name.rpartition(".")
        table = self.scopes.get(scope) if scope else self.aggregates

        if table is None or metric_name not in table:
            raise UnknownMetric(f"{self.submission_id}: no metric named {name!r}")

        value = table[metric_name]
        if value is None:
            raise UnknownMetric(f"{self.submission_id}: metric {name!r} is undefined")

        return value

    def has_metric(self, name: str) -> bool:
        try:
            self.metric(name)
        except UnknownMetric:
            return False
        return True
