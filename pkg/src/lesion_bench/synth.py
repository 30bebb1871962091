"""
Deterministic synthetic challenge data.

Generates ground truth for all three tasks plus submission populations with
controllable degradation, and writes them in the same formats dataset_io
reads, so the whole scoring pipeline can run without the real challenge
images.

Random numbers come from numpy's counter-based Philox-4x64-10 generator,
keyed per purpose with ``SeedSequence([seed, stream, submission])``. The
same (seed, config) gives byte-identical output with the pinned numpy.
"""

import json
import logging
import math
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Any, Mapping

import numpy as np
from scipy import ndimage

from lesion_bench.core_model import (
    DEFAULT_ATTRIBUTE_NAMES,
    DEFAULT_THRESHOLD,
    DIAGNOSIS_CLASSES,
    BinaryMask,
    DatasetManifest,
    ManifestEntry,
    Partition,
    PredictionRecord,
    SegStratum,
    Task,
)
from lesion_bench.dataset_io import save_mask, write_classification_csv, write_manifest
from lesion_bench.errors import InvalidConfig
from lesion_bench.mask_metrics import confusion_counts, jaccard

logger = logging.getLogger(__name__)

DEFAULT_SEED = 20180916

STREAM_SEGMENTATION_TRUTH = 1
STREAM_PERTURBATION = 2
STREAM_SEGMENTATION_POPULATION = 3
STREAM_CLASSIFICATION = 4
STREAM_ATTRIBUTES = 5

# MEL, SEBK, NEVI, OTHER
STRATUM_WEIGHTS = (0.2, 0.1, 0.6, 0.1)

MIN_FOREGROUND = 0.05
MAX_FOREGROUND = 0.6
MAX_BLOB_ATTEMPTS = 100

ATTRIBUTE_PRESENCE = 0.6
ATTRIBUTE_MISS_RATE = 0.3
ATTRIBUTE_FALSE_ALARM_RATE = 0.2
ATTRIBUTE_NOISE_AMPLITUDE = 2.0

PERTURBATION_KINDS = ("dilate", "erode", "boundary_noise")
FAILURE_MODES = ("near_miss", "binary")

COUNT_FIELDS = (
    "n_images",
    "image_size",
    "prevalence_guessers",
    "n_segmentation_submissions",
    "n_attribute_submissions",
    "n_classification_submissions",
)
RATE_FIELDS = (
    "accuracy_knob",
    "external_fraction",
    "external_gap_knob",
    "accuracy_spread",
    "gap_spread",
    "near_miss_jaccard",
    "max_failure_rate",
)


def _is_integer(value: Any) -> bool:
    return isinstance(value, int) and not isinstance(value, bool)


def _is_real(value: Any) -> bool:
    if isinstance(value, bool) or not isinstance(value, (int, float)):
        return False
    try:
        return math.isfinite(value)
    except OverflowError:
        return False


def make_rng(seed: int, stream: int, submission: int = 0) -> np.random.Generator:
    return np.random.Generator(np.random.Philox(np.random.SeedSequence([seed, stream, submission])))


@dataclass(frozen=True)
class Perturbation:
    """``amount`` is a radius in pixels for dilate/erode, an amplitude in pixels for boundary_noise."""

    kind: str = "dilate"
    amount: float = 1.0

    def __post_init__(self):
        if not isinstance(self.kind, str) or self.kind not in PERTURBATION_KINDS:
            raise InvalidConfig(f"Unknown perturbation {self.kind!r}; expected one of {', '.join(PERTURBATION_KINDS)}")
        if not _is_real(self.amount) or self.amount < 0:
            raise InvalidConfig(f"Perturbation amount must be >= 0, got {self.amount!r}")
        object.__setattr__(self, "amount", float(self.amount))


@dataclass(frozen=True)
class SynthConfig:
    seed: int = DEFAULT_SEED
    n_images: int = 100
    image_size: int = 64
    perturbation: Perturbation = field(default_factory=Perturbation)
    class_priors: tuple[float, ...] = (0.3, 0.3, 0.1, 0.1, 0.1, 0.05, 0.05)
    accuracy_knob: float = 0.8
    external_fraction: float = 0.2
    external_gap_knob: float = 0.0
    accuracy_spread: float = 0.0
    gap_spread: float = 0.0
    prevalence_guessers: int = 0
    failure_mode: str = "near_miss"
    near_miss_jaccard: float = 0.6
    max_failure_rate: float = 0.5
    n_segmentation_submissions: int = 3
    n_attribute_submissions: int = 1
    n_classification_submissions: int = 3
    attribute_names: tuple[str, ...] = DEFAULT_ATTRIBUTE_NAMES

    def __post_init__(self):
        for name in COUNT_FIELDS:
            if not _is_integer(getattr(self, name)):
                raise InvalidConfig(f"{name} must be an integer, got {getattr(self, name)!r}")
        for name in RATE_FIELDS:
            if not _is_real(getattr(self, name)):
                raise InvalidConfig(f"{name} must be a finite number, got {getattr(self, name)!r}")
            object.__setattr__(self, name, float(getattr(self, name)))

        if not isinstance(self.class_priors, (list, tuple)) or not all(_is_real(p) for p in self.class_priors):
            raise InvalidConfig(f"class_priors must be a list of finite numbers, got {self.class_priors!r}")
        object.__setattr__(self, "class_priors", tuple(float(p) for p in self.class_priors))

        if not isinstance(self.attribute_names, (list, tuple)) or not all(
            isinstance(name, str) and name for name in self.attribute_names
        ):
            raise InvalidConfig(f"attribute_names must be a list of non-empty strings, got {self.attribute_names!r}")
        if len(set(self.attribute_names)) != len(self.attribute_names):
            raise InvalidConfig(f"attribute_names repeats a name: {list(self.attribute_names)!r}")
        object.__setattr__(self, "attribute_names", tuple(self.attribute_names))

        if not isinstance(self.perturbation, Perturbation):
            raise InvalidConfig(f"perturbation must be a Perturbation, got {self.perturbation!r}")
        if not isinstance(self.failure_mode, str):
            raise InvalidConfig(f"failure_mode must be a string, got {self.failure_mode!r}")

        if not _is_integer(self.seed) or not 0 <= self.seed < 2**64:
            raise InvalidConfig(f"seed must be a 64-bit unsigned integer, got {self.seed!r}")
        if self.n_images < 0:
            raise InvalidConfig(f"n_images must be >= 0, got {self.n_images}")
        if self.image_size < 8:
            raise InvalidConfig(f"image_size must be >= 8, got {self.image_size}")

        if len(self.class_priors) != len(DIAGNOSIS_CLASSES):
            raise InvalidConfig(f"class_priors needs {len(DIAGNOSIS_CLASSES)} values, got {len(self.class_priors)}")
        if any(p < 0 for p in self.class_priors) or abs(sum(self.class_priors) - 1.0) > 1e-9:
            raise InvalidConfig(f"class_priors must be non-negative and sum to 1, got {self.class_priors}")

        for name in ("accuracy_knob", "external_fraction", "max_failure_rate", "accuracy_spread", "gap_spread"):
            value = getattr(self, name)
            if not 0.0 <= value <= 1.0:
                raise InvalidConfig(f"{name} must be in [0, 1], got {value!r}")
        if not -1.0 <= self.external_gap_knob <= 1.0:
            raise InvalidConfig(f"external_gap_knob must be in [-1, 1], got {self.external_gap_knob!r}")
        if not 0.0 <= self.near_miss_jaccard < DEFAULT_THRESHOLD:
            raise InvalidConfig(f"near_miss_jaccard must be in [0, {DEFAULT_THRESHOLD}), got {self.near_miss_jaccard!r}")
        if self.failure_mode not in FAILURE_MODES:
            raise InvalidConfig(f"Unknown failure_mode {self.failure_mode!r}; expected one of {', '.join(FAILURE_MODES)}")

        for name in (
            "prevalence_guessers",
            "n_segmentation_submissions",
            "n_attribute_submissions",
            "n_classification_submissions",
        ):
            if getattr(self, name) < 0:
                raise InvalidConfig(f"{name} must be >= 0, got {getattr(self, name)}")

    @classmethod
    def from_dict(cls, data: Mapping[str, Any]) -> "SynthConfig":
        known = {f.name for f in fields(cls)}
        unknown = sorted(set(data) - known)
        if unknown:
            raise InvalidConfig(f"Unknown config keys: {', '.join(unknown)}")

        values = dict(data)
        if "perturbation" in values:
            perturbation = values["perturbation"]
            if not isinstance(perturbation, Mapping):
                raise InvalidConfig("perturbation must be an object with kind and amount")
            values["perturbation"] = _perturbation_from_dict(perturbation)

        try:
            return cls(**values)
        except TypeError as e:
            raise InvalidConfig(str(e)) from e

    def to_dict(self) -> dict[str, Any]:
        data = asdict(self)
        data["class_priors"] = list(self.class_priors)
        data["attribute_names"] = list(self.attribute_names)
        return data


PERTURBATION_SHORTHANDS = {
    "dilate_radius": "dilate",
    "erode_radius": "erode",
    "boundary_noise_amplitude": "boundary_noise",
}


def _perturbation_from_dict(data: Mapping[str, Any]) -> Perturbation:
    """Either ``{"kind": "erode", "amount": 2}`` or the shorthand ``{"erode_radius": 2}``."""
    shorthand = [key for key in data if key in PERTURBATION_SHORTHANDS]
    if shorthand:
        if len(data) != 1:
            raise InvalidConfig(f"perturbation shorthand takes exactly one key, got {', '.join(sorted(data))}")
        key = shorthand[0]
        return Perturbation(kind=PERTURBATION_SHORTHANDS[key], amount=data[key])

    try:
        return Perturbation(**data)
    except TypeError as e:
        raise InvalidConfig(f"Invalid perturbation: {e}") from e


def load_synth_config(path: Path | str) -> SynthConfig:
    path = Path(path)
    try:
        with open(path, "r", encoding="utf-8") as f:
            data = json.load(f)
    except (OSError, json.JSONDecodeError) as e:
        raise InvalidConfig(f"Cannot read config: {e}", path=path) from e

    if not isinstance(data, dict):
        raise InvalidConfig("Config must be a JSON object", path=path)

    try:
        return SynthConfig.from_dict(data)
    except InvalidConfig as e:
        raise InvalidConfig(e.message, path=path) from e


@dataclass(frozen=True)
class SyntheticSegmentation:
    manifest: DatasetManifest
    masks: dict[str, BinaryMask]


@dataclass(frozen=True)
class SyntheticAttributes:
    manifest: DatasetManifest
    masks: dict[tuple[str, str], BinaryMask]


@dataclass(frozen=True)
class PerturbedSubmission:
    masks: dict[str, BinaryMask]
    jaccards: dict[str, float]


@dataclass(frozen=True)
class SyntheticClassification:
    manifest: DatasetManifest
    submissions: dict[str, tuple[PredictionRecord, ...]]


def image_id_for(index: int) -> str:
    return f"synth_{index:05d}"


def disk(radius: int) -> np.ndarray:
    r = int(radius)
    yy, xx = np.mgrid[-r : r + 1, -r : r + 1]
    return xx * xx + yy * yy <= r * r


def _ellipse(
    rng: np.random.Generator,
    size: int,
    low: float,
    high: float,
) -> np.ndarray:
    """A filled ellipse with a smooth lobed boundary, fully inside the grid."""
    yy, xx = np.mgrid[0:size, 0:size] + 0.5

    fraction = rng.uniform(low, high)
    aspect = rng.uniform(0.6, 1.0)
    wobble = rng.uniform(0.0, 0.1)
    lobes = int(rng.integers(2, 6))
    phase = rng.uniform(0.0, 2 * math.pi)
    angle = rng.uniform(0.0, math.pi)

    a = math.sqrt(fraction * size * size / (math.pi * aspect))
    b = a * aspect
    reach = a * (1 + wobble)
    cx = rng.uniform(reach, max(reach, size - reach))
    cy = rng.uniform(reach, max(reach, size - reach))

    dx = xx - cx
    dy = yy - cy
    u = math.cos(angle) * dx + math.sin(angle) * dy
    v = -math.sin(angle) * dx + math.cos(angle) * dy

    rho = np.hypot(u / a, v / b)
    theta = np.arctan2(v / b, u / a)

    return rho <= 1.0 + wobble * np.sin(lobes * theta + phase)


def gen_lesion_mask(rng: np.random.Generator, size: int) -> BinaryMask:
    """A smooth closed blob covering between 5% and 60% of the image."""
    for _ in range(MAX_BLOB_ATTEMPTS):
        bits = _ellipse(rng, size, 0.1, 0.35)
        if MIN_FOREGROUND <= bits.mean() <= MAX_FOREGROUND:
            return BinaryMask(bits)

    # Centered square covering a quarter of the image.
    bits = np.zeros((size, size), dtype=bool)
    quarter = size // 4
    bits[quarter : size - quarter, quarter : size - quarter] = True
    return BinaryMask(bits)


def gen_segmentation_truth(config: SynthConfig) -> SyntheticSegmentation:
    rng = make_rng(config.seed, STREAM_SEGMENTATION_TRUTH)
    strata = tuple(SegStratum)

    entries = []
    masks = {}
    for i in range(config.n_images):
        image_id = image_id_for(i)
        stratum = strata[int(rng.choice(len(strata), p=STRATUM_WEIGHTS))]
        masks[image_id] = gen_lesion_mask(rng, config.image_size)
        entries.append(
            ManifestEntry(
                image_id=image_id,
                masks=(Path("truth") / f"{image_id}_segmentation.png",),
                stratum=stratum,
            )
        )

    manifest = DatasetManifest(task=Task.SEGMENTATION, entries=tuple(entries))
    logger.info(f"Progress: generated {len(entries)} segmentation ground truth masks")

    return SyntheticSegmentation(manifest=manifest, masks=masks)


def perturb_mask(bits: np.ndarray, perturbation: Perturbation, rng: np.random.Generator) -> np.ndarray:
    amount = perturbation.amount

    match perturbation.kind:
        case "dilate":
            radius = int(round(amount))
            if radius == 0:
                return bits.copy()
            return ndimage.binary_dilation(bits, structure=disk(radius))
        case "erode":
            radius = int(round(amount))
            if radius == 0:
                return bits.copy()
            return ndimage.binary_erosion(bits, structure=disk(radius), border_value=0)
        case "boundary_noise":
            field_ = ndimage.gaussian_filter(rng.normal(size=bits.shape), sigma=2.0)
            peak = np.abs(field_).max()
            noise = field_ / peak * amount if peak > 0 else np.zeros(bits.shape)
            signed = ndimage.distance_transform_edt(bits) - ndimage.distance_transform_edt(~bits)
            return signed + noise > 0


def perturb_submission(
    truth_masks: Mapping[str, BinaryMask],
    config: SynthConfig,
    submission: int = 0,
) -> PerturbedSubmission:
    """
    Apply the configured perturbation to every truth mask, in image id order,
    and record the Jaccard each image achieved.
    """
    rng = make_rng(config.seed, STREAM_PERTURBATION, submission)

    masks = {}
    jaccards = {}
    for image_id in sorted(truth_masks):
        truth = truth_masks[image_id]
        mask = BinaryMask(perturb_mask(truth.bits, config.perturbation, rng))
        masks[image_id] = mask
        jaccards[image_id] = jaccard(confusion_counts(mask, truth))

    return PerturbedSubmission(masks=masks, jaccards=jaccards)


def shrink_to_jaccard(truth: BinaryMask, target: float, round_up: bool) -> BinaryMask:
    """
    Keep the ``target`` share of truth pixels deepest inside the region, so the
    result is a subset of truth with Jaccard of about ``target``: at most
    ``target`` when rounding down, at least when rounding up.
    """
    area = truth.foreground
    keep = target * area
    keep = math.ceil(keep) if round_up else math.floor(keep)

    depth = ndimage.distance_transform_edt(truth.bits).ravel()
    order = np.argsort(-depth, kind="stable")[:keep]

    bits = np.zeros(truth.bits.size, dtype=bool)
    bits[order] = True
    return BinaryMask(bits.reshape(truth.shape))


def gen_segmentation_population(
    truth_masks: Mapping[str, BinaryMask],
    config: SynthConfig,
    n_submissions: int | None = None,
) -> dict[str, dict[str, BinaryMask]]:
    """
    Submissions with a controlled failure rate each. In ``binary`` mode failed
    images are empty (J = 0) and the rest exact (J = 1); in ``near_miss`` mode
    failed images land just under the threshold and the rest score 0.8-0.97.
    """
    n_submissions = config.n_segmentation_submissions if n_submissions is None else n_submissions
    image_ids = sorted(truth_masks)

    population = {}
    for k in range(n_submissions):
        rng = make_rng(config.seed, STREAM_SEGMENTATION_POPULATION, k)
        rate = rng.uniform(0.0, config.max_failure_rate)
        n_failed = int(round(rate * len(image_ids)))
        failed = set(rng.permutation(len(image_ids))[:n_failed].tolist())

        masks = {}
        for i, image_id in enumerate(image_ids):
            truth = truth_masks[image_id]
            quality = rng.uniform(0.8, 0.97)

            if config.failure_mode == "binary":
                masks[image_id] = BinaryMask.empty(truth.width, truth.height) if i in failed else truth
            elif i in failed:
                masks[image_id] = shrink_to_jaccard(truth, config.near_miss_jaccard, round_up=False)
            else:
                masks[image_id] = shrink_to_jaccard(truth, quality, round_up=True)

        population[f"seg_{k:03d}"] = masks

    return population


def gen_attribute_truth(config: SynthConfig, lesions: Mapping[str, BinaryMask]) -> SyntheticAttributes:
    """Per lesion and attribute, a small region inside the lesion or nothing."""
    rng = make_rng(config.seed, STREAM_ATTRIBUTES)

    entries = []
    masks = {}
    for image_id in sorted(lesions):
        lesion = lesions[image_id]
        paths = []
        for attribute in config.attribute_names:
            present = rng.random() < ATTRIBUTE_PRESENCE
            region = _ellipse(rng, config.image_size, 0.01, 0.06) & lesion.bits
            masks[(image_id, attribute)] = BinaryMask(region if present else np.zeros_like(region))
            paths.append(Path("truth") / f"{image_id}_attribute_{attribute}.png")
        entries.append(ManifestEntry(image_id=image_id, masks=tuple(paths)))

    manifest = DatasetManifest(
        task=Task.ATTRIBUTES,
        entries=tuple(entries),
        attribute_names=config.attribute_names,
    )
    return SyntheticAttributes(manifest=manifest, masks=masks)


def gen_attribute_submission(
    truth: SyntheticAttributes,
    config: SynthConfig,
    submission: int = 0,
) -> dict[tuple[str, str], BinaryMask]:
    """Noisy boundaries, missed regions and false alarms."""
    rng = make_rng(config.seed, STREAM_ATTRIBUTES, submission + 1)
    noise = Perturbation("boundary_noise", ATTRIBUTE_NOISE_AMPLITUDE)

    masks = {}
    for key in sorted(truth.masks):
        bits = truth.masks[key].bits
        if bits.any():
            missed = rng.random() < ATTRIBUTE_MISS_RATE
            predicted = np.zeros_like(bits) if missed else perturb_mask(bits, noise, rng)
        else:
            alarm = rng.random() < ATTRIBUTE_FALSE_ALARM_RATE
            predicted = _ellipse(rng, config.image_size, 0.01, 0.04) if alarm else np.zeros_like(bits)
        masks[key] = BinaryMask(predicted)

    return masks


def _confidences(rng: np.random.Generator, winner: int | None) -> np.ndarray:
    """Seven confidences; ``winner`` strictly largest when given, else all uniform."""
    if winner is None:
        return rng.uniform(0.0, 1.0, len(DIAGNOSIS_CLASSES))

    top = rng.uniform(0.5, 1.0)
    probs = rng.uniform(0.0, 1.0, len(DIAGNOSIS_CLASSES)) * (1.0 - top) * 0.999
    probs[winner] = top
    return probs


def gen_classification_population(
    config: SynthConfig,
    n_submissions: int | None = None,
) -> SyntheticClassification:
    """
    Labels drawn from ``class_priors``; ``external_fraction`` of the images
    form the external partition. Each submission decides correctly with
    probability equal to its accuracy level on internal images and that level
    minus its gap on external ones; otherwise its confidences carry no label
    information (or, for prevalence guessers, favor the most common class).
    """
    n_submissions = config.n_classification_submissions if n_submissions is None else n_submissions
    rng = make_rng(config.seed, STREAM_CLASSIFICATION)

    n = config.n_images
    labels = rng.choice(len(DIAGNOSIS_CLASSES), size=n, p=config.class_priors)
    n_external = int(round(config.external_fraction * n))
    external = set(rng.permutation(n)[:n_external].tolist())

    entries = tuple(
        ManifestEntry(
            image_id=image_id_for(i),
            label=DIAGNOSIS_CLASSES[int(labels[i])],
            partition=Partition.EXTERNAL if i in external else Partition.INTERNAL,
        )
        for i in range(n)
    )
    manifest = DatasetManifest(task=Task.CLASSIFICATION, entries=entries)

    majority = int(np.argmax(config.class_priors))

    submissions = {}
    for k in range(n_submissions):
        sub_rng = make_rng(config.seed, STREAM_CLASSIFICATION, k + 1)
        level = float(np.clip(config.accuracy_knob + sub_rng.uniform(-config.accuracy_spread, config.accuracy_spread), 0, 1))
        gap = config.external_gap_knob + sub_rng.uniform(-config.gap_spread, config.gap_spread)
        external_level = float(np.clip(level - gap, 0, 1))
        guesser = k < config.prevalence_guessers

        records = []
        for i in range(n):
            threshold = external_level if i in external else level
            if sub_rng.random() < threshold:
                winner = int(labels[i])
            elif guesser:
                winner = majority
            else:
                winner = None
            probs = _confidences(sub_rng, winner)
            records.append(PredictionRecord(image_id=image_id_for(i), probs=tuple(float(p) for p in probs)))

        submissions[f"cls_{k:03d}"] = tuple(records)

    logger.info(f"Progress: generated {n} classification labels and {n_submissions} submissions")

    return SyntheticClassification(manifest=manifest, submissions=submissions)


def write_synthetic_dataset(config: SynthConfig, out_dir: Path | str) -> dict[str, Path]:
    """
    Write all three tasks under ``out_dir``:

        config.json
        segmentation/manifest.csv, truth/, submissions/<id>/
        attributes/manifest.csv, truth/, submissions/<id>/
        classification/manifest.csv, submissions/<id>.csv
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)

    with open(out_dir / "config.json", "w", encoding="utf-8") as f:
        json.dump(config.to_dict(), f, ensure_ascii=False, indent=2)
        f.write("\n")

    seg_dir = out_dir / "segmentation"
    segmentation = gen_segmentation_truth(config)
    write_manifest(segmentation.manifest, seg_dir / "manifest.csv")
    for image_id, mask in segmentation.masks.items():
        save_mask(mask, seg_dir / "truth" / f"{image_id}_segmentation.png")

    seg_submissions = {"perturbed": perturb_submission(segmentation.masks, config).masks}
    seg_submissions.update(gen_segmentation_population(segmentation.masks, config))
    for submission_id, masks in seg_submissions.items():
        for image_id, mask in masks.items():
            save_mask(mask, seg_dir / "submissions" / submission_id / f"{image_id}_segmentation.png")

    attr_dir = out_dir / "attributes"
    attributes = gen_attribute_truth(config, segmentation.masks)
    write_manifest(attributes.manifest, attr_dir / "manifest.csv")
    for (image_id, attribute), mask in attributes.masks.items():
        save_mask(mask, attr_dir / "truth" / f"{image_id}_attribute_{attribute}.png")

    for k in range(config.n_attribute_submissions):
        masks = gen_attribute_submission(attributes, config, k)
        for (image_id, attribute), mask in masks.items():
            save_mask(mask, attr_dir / "submissions" / f"attr_{k:03d}" / f"{image_id}_attribute_{attribute}.png")

    cls_dir = out_dir / "classification"
    classification = gen_classification_population(config)
    write_manifest(classification.manifest, cls_dir / "manifest.csv")
    for submission_id, records in classification.submissions.items():
        write_classification_csv(records, cls_dir / "submissions" / f"{submission_id}.csv")

    logger.info(f"Progress: saved synthetic dataset to {out_dir}")

    return {
        "segmentation": seg_dir / "manifest.csv",
        "attributes": attr_dir / "manifest.csv",
        "classification": cls_dir / "manifest.csv",
    }
