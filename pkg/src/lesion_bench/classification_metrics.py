"""
Disease classification scoring.

Each prediction record is turned into one mutually exclusive decision by
argmax. Balanced accuracy (mean per-class recall) is the headline metric,
reported next to plain accuracy and one-vs-rest ROC AUC per class, over the
whole test set and over its internal and external partitions.
"""

import logging
from dataclasses import dataclass, field
from enum import Enum
from typing import Iterable, Mapping, Sequence

import numpy as np
from sklearn import metrics

from lesion_bench.core_model import (
    DIAGNOSIS_CLASSES,
    DatasetManifest,
    DiagnosisClass,
    Flag,
    Partition,
    PredictionRecord,
)
from lesion_bench.errors import (
    DegenerateLabels,
    EmptyMatrix,
    MissingPrediction,
    ValidationError,
)
from lesion_bench.parallel import ordered_map

logger = logging.getLogger(__name__)


class Scope(str, Enum):
    ALL = "ALL"
    INTERNAL = "INTERNAL"
    EXTERNAL = "EXTERNAL"


GAP_SCOPE = "GAP"

METRIC_NAMES = ("bacc", "acc", "mean_auc", *(f"auc_{cls.value}" for cls in DIAGNOSIS_CLASSES))


@dataclass(frozen=True, eq=False)
class ConfusionMatrix:
    """Rows are true classes, columns decided classes, both in ``labels`` order."""

    counts: np.ndarray
    labels: tuple[str, ...] = tuple(c.value for c in DIAGNOSIS_CLASSES)

    def __post_init__(self):
        counts = np.array(self.counts, dtype=np.int64, copy=True)
        k = len(self.labels)
        if counts.shape != (k, k):
            raise ValidationError(f"Confusion matrix must be {k}x{k}, got shape {counts.shape}")
        if (counts < 0).any():
            raise ValidationError("Confusion matrix counts must be non-negative")
        counts.flags.writeable = False
        object.__setattr__(self, "counts", counts)
        object.__setattr__(self, "labels", tuple(self.labels))

    def __add__(self, other: "ConfusionMatrix") -> "ConfusionMatrix":
        if not isinstance(other, ConfusionMatrix):
            return NotImplemented
        if self.labels != other.labels:
            raise ValidationError("Cannot add confusion matrices with different labels")
        return ConfusionMatrix(self.counts + other.counts, self.labels)

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, ConfusionMatrix):
            return NotImplemented
        return self.labels == other.labels and bool(np.array_equal(self.counts, other.counts))

    @property
    def total(self) -> int:
        return int(self.counts.sum())

    @property
    def supports(self) -> np.ndarray:
        return self.counts.sum(axis=1)

    def to_list(self) -> list[list[int]]:
        return [[int(v) for v in row] for row in self.counts]


@dataclass(frozen=True)
class RocCurve:
    cls: DiagnosisClass | None
    points: tuple[tuple[float, float], ...]
    auc: float


@dataclass(frozen=True)
class ClsReport:
    scope: Scope
    n: int
    acc: float
    bacc: float
    per_class_auc: dict[DiagnosisClass, float | None]
    mean_auc: float | None
    confusion: ConfusionMatrix
    roc: dict[DiagnosisClass, RocCurve] = field(default_factory=dict)
    flags: tuple[Flag, ...] = ()

    def metrics(self) -> dict[str, float | None]:
        """Flat metric table, headline metric first."""
        values: dict[str, float | None] = {
            "bacc": self.bacc,
            "acc": self.acc,
            "mean_auc": self.mean_auc,
        }
        for cls in DIAGNOSIS_CLASSES:
            values[f"auc_{cls.value}"] = self.per_class_auc.get(cls)
        return values


@dataclass(frozen=True)
class ClassificationResult:
    reports: dict[Scope, ClsReport]
    gaps: dict[str, float | None]
    decisions: dict[str, DiagnosisClass]
    flags: tuple[Flag, ...] = ()


def argmax_decision(record: PredictionRecord) -> tuple[DiagnosisClass, bool]:
    """
    The class with the highest probability, and whether a tie was broken.
    Exact ties go to the earliest class in DiagnosisClass order.
    """
    probs = np.asarray(record.probs, dtype=np.float64)
    winner = int(np.argmax(probs))
    tie_broken = int(np.count_nonzero(probs == probs[winner])) > 1

    return DIAGNOSIS_CLASSES[winner], tie_broken


def confusion_matrix(
    decisions: Mapping[str, DiagnosisClass],
    manifest: DatasetManifest,
    image_ids: Iterable[str] | None = None,
) -> ConfusionMatrix:
    """Tally decisions against manifest labels over ``image_ids`` (default: all)."""
    ids = manifest.image_ids() if image_ids is None else sorted(image_ids)

    missing = [image_id for image_id in ids if image_id not in decisions]
    if missing:
        raise MissingPrediction("No decision for", missing)

    positions = list(range(len(DIAGNOSIS_CLASSES)))
    if not ids:
        return ConfusionMatrix(np.zeros((len(positions), len(positions)), dtype=np.int64))

    y_true = [manifest.entry(image_id).label.position for image_id in ids]
    y_pred = [decisions[image_id].position for image_id in ids]

    return ConfusionMatrix(metrics.confusion_matrix(y_true, y_pred, labels=positions))


def zero_support_labels(cm: ConfusionMatrix) -> list[str]:
    return [label for label, support in zip(cm.labels, cm.supports) if support == 0]


def balanced_accuracy(cm: ConfusionMatrix) -> float:
    """Mean recall over classes with nonzero support."""
    supports = cm.supports
    present = supports > 0

    if not present.any():
        raise EmptyMatrix("Every class has zero support")

    recalls = np.diag(cm.counts)[present] / supports[present]
    return float(np.mean(recalls))


def accuracy(cm: ConfusionMatrix) -> float:
    total = cm.total
    if total == 0:
        raise EmptyMatrix("Confusion matrix is empty")
    return int(np.trace(cm.counts)) / total


def roc_auc(scores: Sequence[tuple[float, bool]], cls: DiagnosisClass | None = None) -> RocCurve:
    """
    One-vs-rest ROC from (score, is_positive) pairs. The threshold sweeps the
    distinct scores in descending order, so tied scores form a single step,
    and the trapezoidal area equals the Mann-Whitney statistic with ties
    credited one half.
    """
    y_score = np.asarray([s for s, _ in scores], dtype=np.float64)
    y_true = np.asarray([bool(label) for _, label in scores], dtype=np.int8)

    positives = int(y_true.sum())
    negatives = len(y_true) - positives
    if positives == 0 or negatives == 0:
        raise DegenerateLabels(
            f"ROC needs positives and negatives, got {positives} positive and {negatives} negative"
        )

    fpr, tpr, _thresholds = metrics.roc_curve(y_true, y_score, drop_intermediate=False)
    area = float(metrics.auc(fpr, tpr))

    points = tuple((float(x), float(y)) for x, y in zip(fpr, tpr))

    return RocCurve(cls=cls, points=points, auc=area)


def _scope_ids(manifest: DatasetManifest, scope: Scope) -> list[str]:
    if scope is Scope.ALL:
        return manifest.image_ids()
    return manifest.ids_in_partition(Partition(scope.value))


def score_scope(
    scope: Scope,
    image_ids: Sequence[str],
    manifest: DatasetManifest,
    records: Mapping[str, PredictionRecord],
    decisions: Mapping[str, DiagnosisClass],
) -> ClsReport:
    cm = confusion_matrix(decisions, manifest, image_ids)
    flags = [
        Flag("ZeroSupport", f"{scope.value}: class {label} has no images; excluded from balanced accuracy")
        for label in zero_support_labels(cm)
    ]

    per_class_auc: dict[DiagnosisClass, float | None] = {}
    roc = {}

    for cls in DIAGNOSIS_CLASSES:
        scores = [
            (records[image_id].prob(cls), manifest.entry(image_id).label is cls)
            for image_id in image_ids
        ]
        try:
            curve = roc_auc(scores, cls=cls)
        except DegenerateLabels as e:
            flags.append(Flag("DegenerateLabels", f"{scope.value}: AUC for {cls.value} undefined: {e.message}"))
            per_class_auc[cls] = None
            continue

        roc[cls] = curve
        per_class_auc[cls] = curve.auc

    defined = [auc for auc in per_class_auc.values() if auc is not None]
    mean_auc = float(np.mean(defined)) if defined else None

    return ClsReport(
        scope=scope,
        n=len(image_ids),
        acc=accuracy(cm),
        bacc=balanced_accuracy(cm),
        per_class_auc=per_class_auc,
        mean_auc=mean_auc,
        confusion=cm,
        roc=roc,
        flags=tuple(flags),
    )


def score_classification(
    manifest: DatasetManifest,
    predictions: Iterable[PredictionRecord],
    workers: int = 1,
) -> ClassificationResult:
    """
    Score the whole test set and each partition with the same computation,
    then report internal minus external for every metric.
    """
    records = {record.image_id: record for record in predictions}
    image_ids = manifest.image_ids()

    missing = [image_id for image_id in image_ids if image_id not in records]
    if missing:
        raise MissingPrediction("No prediction for", missing)

    logger.info(f"Progress: scoring {len(image_ids)} classification records")

    outcomes = ordered_map(lambda image_id: argmax_decision(records[image_id]), image_ids, workers)

    decisions = {}
    flags = []
    for image_id, (decision, tie_broken) in zip(image_ids, outcomes):
        decisions[image_id] = decision
        if tie_broken:
            flags.append(Flag("TieBroken", f"Tied maximum probability; decided {decision.value}", image_id))

    if flags:
        logger.warning(f"TieBroken: {len(flags)} records had tied maximum probabilities")

    reports = {}
    for scope in Scope:
        scope_ids = _scope_ids(manifest, scope)
        if not scope_ids:
            flags.append(Flag("EmptyScope", f"No images in scope {scope.value}"))
            continue

        report = score_scope(scope, scope_ids, manifest, records, decisions)
        reports[scope] = report
        flags.extend(report.flags)

        logger.info(f"Score: {scope.value}: BACC={report.bacc:.4f} ACC={report.acc:.4f} n={report.n}")

    gaps = generalization_gaps(reports)

    return ClassificationResult(
        reports=reports,
        gaps=gaps,
        decisions=decisions,
        flags=tuple(flags),
    )


def generalization_gaps(reports: Mapping[Scope, ClsReport]) -> dict[str, float | None]:
    """Internal minus external for every metric; None where either side is undefined."""
    internal = reports.get(Scope.INTERNAL)
    external = reports.get(Scope.EXTERNAL)

    names = METRIC_NAMES

    if internal is None or external is None:
        return {name: None for name in names}

    internal_values = internal.metrics()
    external_values = external.metrics()

    gaps = {}
    for name in names:
        a = internal_values[name]
        b = external_values[name]
        gaps[name] = None if a is None or b is None else a - b

    return gaps
