"""
Lesion segmentation and attribute detection scoring.

Segmentation is scored per image with the Jaccard index and its thresholded
variant: an image whose Jaccard falls below the threshold T counts as a
failure and contributes zero. Attribute detection is scored with a Jaccard
computed from TP/FP/FN summed over the whole dataset, one value per
attribute, so attributes absent from an image never divide by zero.
"""

import logging
from dataclasses import dataclass, field
from decimal import ROUND_HALF_UP, Decimal
from typing import Iterable, Mapping, Sequence

import numpy as np

from lesion_bench.core_model import (
    DEFAULT_THRESHOLD,
    BinaryMask,
    DatasetManifest,
    Flag,
    PixelCounts,
    SegStratum,
)
from lesion_bench.errors import (
    DimensionMismatch,
    DomainError,
    InsufficientData,
    LesionBenchError,
    MissingField,
    MissingPrediction,
)
from lesion_bench.parallel import ordered_map

logger = logging.getLogger(__name__)

ROUNDING_STEP = Decimal("0.05")


@dataclass(frozen=True)
class SegImageScore:
    image_id: str
    counts: PixelCounts
    jaccard: float
    thresholded_jaccard: float
    failed: bool
    stratum: SegStratum | None = None
    both_empty: bool = False


@dataclass(frozen=True)
class StratumSummary:
    failure_rate: float
    thresholded_jaccard: float
    jaccard: float
    n: int


@dataclass(frozen=True)
class SegReport:
    threshold: float
    n_images: int
    mean_jaccard: float
    mean_thresholded_jaccard: float
    failure_rate: float
    per_stratum: dict[SegStratum, StratumSummary] = field(default_factory=dict)

    def __post_init__(self):
        if self.mean_thresholded_jaccard > self.mean_jaccard:
            raise LesionBenchError(
                f"Thresholded Jaccard {self.mean_thresholded_jaccard} exceeds Jaccard {self.mean_jaccard}"
            )
        if not 0.0 <= self.failure_rate <= 1.0:
            raise LesionBenchError(f"Failure rate {self.failure_rate} outside [0, 1]")


@dataclass(frozen=True)
class SegmentationResult:
    report: SegReport
    images: tuple[SegImageScore, ...]
    flags: tuple[Flag, ...] = ()


@dataclass(frozen=True)
class ThresholdDerivation:
    threshold: float
    mean: float
    range: float
    rounded_lowest: float
    rounded_range: float


@dataclass(frozen=True)
class AttributeResult:
    per_attribute: dict[str, float]
    mean: float
    totals: dict[str, PixelCounts]
    per_image: dict[tuple[str, str], PixelCounts]
    flags: tuple[Flag, ...] = ()


def confusion_counts(pred: BinaryMask, gt: BinaryMask) -> PixelCounts:
    """Pixel-wise confusion of a predicted mask against ground truth."""
    if pred.shape != gt.shape:
        raise DimensionMismatch(
            f"Prediction is {pred.width}x{pred.height} but ground truth is {gt.width}x{gt.height}"
        )

    p = pred.bits
    g = gt.bits

    tp = int(np.count_nonzero(p & g))
    fp = int(np.count_nonzero(p & ~g))
    fn_ = int(np.count_nonzero(~p & g))
    tn = p.size - tp - fp - fn_

    return PixelCounts(tp=tp, fp=fp, fn_=fn_, tn=tn)


def jaccard(counts: PixelCounts) -> float:
    """
    TP / (TP + FP + FN). Two empty masks agree perfectly and score 1.0;
    callers check ``is_both_empty`` to flag that case.
    """
    union = counts.tp + counts.fp + counts.fn_
    if union == 0:
        return 1.0
    return counts.tp / union


def is_both_empty(counts: PixelCounts) -> bool:
    return counts.tp + counts.fp + counts.fn_ == 0


def thresholded_jaccard(j: float, threshold: float) -> float:
    """Zero when ``j`` falls below ``threshold``; a value equal to the threshold passes."""
    if not 0.0 <= j <= 1.0:
        raise DomainError(f"Jaccard must be in [0, 1], got {j!r}")
    if not 0.0 < threshold < 1.0:
        raise DomainError(f"Threshold must be in (0, 1), got {threshold!r}")

    if j < threshold:
        return 0.0
    return j


def round_to_step(value: Decimal, step: Decimal = ROUNDING_STEP) -> Decimal:
    """Round to the nearest multiple of ``step``, halves away from zero."""
    return (value / step).quantize(Decimal(1), rounding=ROUND_HALF_UP) * step


def derive_threshold(interobserver_jaccards: Iterable[float]) -> ThresholdDerivation:
    """
    Derive the failure threshold from interobserver agreement: the lowest
    agreement rounded to 0.05, minus the agreement range rounded to 0.05.

    Arithmetic is done in decimal on the shortest repr of each input, so
    0.743, 0.754 and 0.861 give exactly T = 0.65, mean 0.786, range 0.118.
    """
    values = [Decimal(repr(float(v))) for v in interobserver_jaccards]

    if len(values) < 2:
        raise InsufficientData(f"Need at least 2 interobserver values, got {len(values)}")
    for v in values:
        if not Decimal(0) <= v <= Decimal(1):
            raise DomainError(f"Interobserver Jaccard must be in [0, 1], got {v}")

    lowest = min(values)
    spread = max(values) - lowest
    mean = sum(values) / len(values)

    rounded_lowest = round_to_step(lowest)
    rounded_range = round_to_step(spread)

    return ThresholdDerivation(
        threshold=float(rounded_lowest - rounded_range),
        mean=float(mean),
        range=float(spread),
        rounded_lowest=float(rounded_lowest),
        rounded_range=float(rounded_range),
    )


def _mean(values: Sequence[float]) -> float:
    return float(np.mean(np.asarray(values, dtype=np.float64)))


def summarize_images(images: Sequence[SegImageScore]) -> StratumSummary:
    """F, TJ, J and n over a set of per-image scores, in the order given."""
    n = len(images)
    if n == 0:
        raise InsufficientData("No images to summarize")

    failures = sum(1 for image in images if image.failed)

    return StratumSummary(
        failure_rate=failures / n,
        thresholded_jaccard=_mean([image.thresholded_jaccard for image in images]),
        jaccard=_mean([image.jaccard for image in images]),
        n=n,
    )


def score_image(
    image_id: str,
    pred: BinaryMask,
    gt: BinaryMask,
    threshold: float = DEFAULT_THRESHOLD,
    stratum: SegStratum | None = None,
) -> SegImageScore:
    try:
        counts = confusion_counts(pred, gt)
    except DimensionMismatch as e:
        raise DimensionMismatch(f"{image_id}: {e.message}") from e

    j = jaccard(counts)
    tj = thresholded_jaccard(j, threshold)

    return SegImageScore(
        image_id=image_id,
        counts=counts,
        jaccard=j,
        thresholded_jaccard=tj,
        failed=j < threshold,
        stratum=stratum,
        both_empty=is_both_empty(counts),
    )


def _check_coverage(expected: Iterable, available: Mapping, what: str) -> None:
    missing = [key for key in expected if key not in available]
    if missing:
        ids = sorted({key if isinstance(key, str) else "/".join(key) for key in missing})
        if what == "prediction":
            raise MissingPrediction("No prediction for", ids)
        raise MissingField(f"No ground truth mask for: {', '.join(ids)}")


def score_segmentation(
    manifest: DatasetManifest,
    truth: Mapping[str, BinaryMask],
    predictions: Mapping[str, BinaryMask],
    threshold: float = DEFAULT_THRESHOLD,
    workers: int = 1,
) -> SegmentationResult:
    """
    Score every manifest image, then aggregate in ascending image id order
    over the whole set and over each stratum.
    """
    image_ids = manifest.image_ids()
    if not image_ids:
        raise InsufficientData("Manifest has no images to score")

    _check_coverage(image_ids, predictions, "prediction")
    _check_coverage(image_ids, truth, "truth")

    logger.info(f"Progress: scoring {len(image_ids)} segmentation masks at T={threshold}")

    def score_one(image_id: str) -> SegImageScore:
        return score_image(
            image_id,
            predictions[image_id],
            truth[image_id],
            threshold=threshold,
            stratum=manifest.entry(image_id).stratum,
        )

    images = ordered_map(score_one, image_ids, workers=workers)

    flags = [
        Flag("BothEmpty", "Prediction and ground truth are both empty; Jaccard set to 1.0", image.image_id)
        for image in images
        if image.both_empty
    ]

    overall = summarize_images(images)

    per_stratum = {}
    for stratum in SegStratum:
        members = [image for image in images if image.stratum is stratum]
        if members:
            per_stratum[stratum] = summarize_images(members)

    report = SegReport(
        threshold=threshold,
        n_images=overall.n,
        mean_jaccard=overall.jaccard,
        mean_thresholded_jaccard=overall.thresholded_jaccard,
        failure_rate=overall.failure_rate,
        per_stratum=per_stratum,
    )

    logger.info(
        f"Score: J={report.mean_jaccard:.4f} TJ={report.mean_thresholded_jaccard:.4f} F={report.failure_rate:.4f}"
    )

    return SegmentationResult(report=report, images=tuple(images), flags=tuple(flags))


def aggregate_attribute_jaccard(
    manifest: DatasetManifest,
    truth: Mapping[tuple[str, str], BinaryMask],
    predictions: Mapping[tuple[str, str], BinaryMask],
    workers: int = 1,
) -> AttributeResult:
    """
    Per attribute, sum TP/FP/FN over all images and take one Jaccard from the
    totals. The overall score is the unweighted mean over attributes.
    """
    keys = [
        (image_id, attribute)
        for attribute in manifest.attribute_names
        for image_id in manifest.image_ids()
    ]

    _check_coverage(keys, predictions, "prediction")
    _check_coverage(keys, truth, "truth")

    logger.info(
        f"Progress: scoring {len(manifest)} images x {len(manifest.attribute_names)} attributes"
    )

    def count_one(key: tuple[str, str]) -> PixelCounts:
        try:
            return confusion_counts(predictions[key], truth[key])
        except DimensionMismatch as e:
            raise DimensionMismatch(f"{key[0]} ({key[1]}): {e.message}") from e

    counts = ordered_map(count_one, keys, workers=workers)
    per_image = dict(zip(keys, counts))

    per_attribute = {}
    totals = {}
    flags = []

    for attribute in manifest.attribute_names:
        total = PixelCounts()
        for image_id in manifest.image_ids():
            total = total + per_image[(image_id, attribute)]

        totals[attribute] = total
        per_attribute[attribute] = jaccard(total)

        if is_both_empty(total):
            flags.append(
                Flag(
                    "AttributeAbsentEverywhere",
                    f"Attribute {attribute} is absent from every ground truth and prediction; Jaccard set to 1.0",
                )
            )

    if per_attribute:
        mean = _mean(list(per_attribute.values()))
    else:
        mean = 1.0

    return AttributeResult(
        per_attribute=per_attribute,
        mean=mean,
        totals=totals,
        per_image=per_image,
        flags=tuple(flags),
    )
