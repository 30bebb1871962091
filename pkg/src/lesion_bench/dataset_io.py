"""
Reading and writing challenge data: manifests, masks and submissions.

Manifest layout:
- ``<name>.csv``: one row per test image (columns depend on the task)
- ``<name>.json``: sidecar with ``schema_version``, ``task``, ``threshold``,
  ``attribute_names`` and file ``naming`` templates

Submissions:
- segmentation: a directory of ``<image_id>_segmentation.png``
- attributes: a directory of ``<image_id>_attribute_<name>.png``
- classification: a CSV with header ``image,MEL,NV,BCC,AKIEC,BKL,DF,VASC``

Every parser validates fully before returning; nothing partially loaded is
handed to scoring. Masks are binarized at >= 128 for both ground truth and
predictions.
"""

import csv
import hashlib
import json
import logging
import re
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np
from PIL import Image, UnidentifiedImageError

from lesion_bench.core_model import (
    DEFAULT_NAMING,
    DEFAULT_THRESHOLD,
    DIAGNOSIS_CLASSES,
    MANIFEST_SCHEMA_VERSION,
    BinaryMask,
    DatasetManifest,
    DiagnosisClass,
    Flag,
    ManifestEntry,
    Partition,
    PredictionRecord,
    SegStratum,
    Task,
)
from lesion_bench.errors import (
    DecodeError,
    DuplicateImageId,
    ExtraRows,
    HeaderMismatch,
    InvalidProbability,
    MissingField,
    MissingPrediction,
    MissingRows,
    ParseError,
    UnsupportedFormat,
    ValueOutOfRange,
)
from lesion_bench.parallel import ordered_map

logger = logging.getLogger(__name__)

BINARIZE_LEVEL = 128

CLASSIFICATION_HEADER = ("image", *(c.value for c in DIAGNOSIS_CLASSES))

# Plain or scientific notation; no locale separators, no nan/inf.
DECIMAL_PATTERN = re.compile(r"[+-]?(\d+(\.\d*)?|\.\d+)([eE][+-]?\d+)?")

# Pillow modes that convert to 8-bit gray without losing the 0..255 scale.
GRAY_CONVERTIBLE_MODES = {"1", "L", "LA", "P", "RGB", "RGBA"}


@dataclass(frozen=True)
class SubmissionBundle:
    submission_id: str
    task: Task
    masks: dict[str, BinaryMask] = field(default_factory=dict)
    attribute_masks: dict[tuple[str, str], BinaryMask] = field(default_factory=dict)
    records: tuple[PredictionRecord, ...] = ()
    flags: tuple[Flag, ...] = ()


def sidecar_path(manifest_path: Path) -> Path:
    return manifest_path.with_suffix(".json")


def manifest_header(task: Task, attribute_names: Sequence[str] = ()) -> tuple[str, ...]:
    match task:
        case Task.SEGMENTATION:
            return ("image", "stratum", "mask")
        case Task.ATTRIBUTES:
            return ("image", *(f"mask_{name}" for name in attribute_names))
        case Task.CLASSIFICATION:
            return ("image", "label", "partition")


def manifest_digest(manifest_path: Path) -> str:
    """sha256 over the manifest CSV bytes followed by the sidecar bytes."""
    digest = hashlib.sha256()
    digest.update(Path(manifest_path).read_bytes())
    digest.update(sidecar_path(Path(manifest_path)).read_bytes())
    return digest.hexdigest()


def _load_sidecar(path: Path) -> dict:
    if not path.exists():
        raise MissingField("Manifest sidecar not found", path=path)

    try:
        with open(path, "r", encoding="utf-8") as f:
            meta = json.load(f)
    except (json.JSONDecodeError, UnicodeDecodeError) as e:
        raise ParseError(f"Invalid JSON: {e}", path=path) from e

    if not isinstance(meta, dict):
        raise ParseError("Sidecar must be a JSON object", path=path)

    for key in ("schema_version", "task"):
        if key not in meta:
            raise MissingField(f"Sidecar has no {key!r}", path=path, column=key)

    if meta["schema_version"] != MANIFEST_SCHEMA_VERSION:
        raise ParseError(
            f"Unsupported schema_version {meta['schema_version']!r}; expected {MANIFEST_SCHEMA_VERSION}",
            path=path,
            column="schema_version",
        )

    return meta


def _sidecar_threshold(meta: dict, sidecar: Path) -> float:
    value = meta.get("threshold", DEFAULT_THRESHOLD)
    if isinstance(value, bool) or not isinstance(value, (int, float)) or not 0.0 < value < 1.0:
        raise ParseError(f"threshold must be a number in (0, 1), got {value!r}", path=sidecar, column="threshold")
    return float(value)


def _sidecar_attribute_names(meta: dict, sidecar: Path) -> tuple[str, ...]:
    names = meta.get("attribute_names", [])
    if not isinstance(names, list) or not all(isinstance(name, str) and name for name in names):
        raise ParseError(
            f"attribute_names must be a list of non-empty strings, got {names!r}",
            path=sidecar,
            column="attribute_names",
        )
    if len(set(names)) != len(names):
        raise ParseError(f"attribute_names repeats a name: {names!r}", path=sidecar, column="attribute_names")
    return tuple(names)


def _sidecar_naming(meta: dict, sidecar: Path) -> dict[str, str]:
    """Filename templates; each must vary with the image id (and the attribute, for attribute masks)."""
    naming = meta.get("naming", {})
    if not isinstance(naming, dict):
        raise ParseError(f"naming must be an object, got {naming!r}", path=sidecar, column="naming")

    unknown = sorted(set(naming) - set(DEFAULT_NAMING))
    if unknown:
        raise ParseError(f"Unknown naming keys: {', '.join(unknown)}", path=sidecar, column="naming")

    naming = {**DEFAULT_NAMING, **naming}
    for key, template in naming.items():
        column = f"naming.{key}"
        if not isinstance(template, str):
            raise ParseError(f"Template must be a string, got {template!r}", path=sidecar, column=column)
        try:
            if key == "segmentation":
                distinct = template.format(image_id="a") != template.format(image_id="b")
            else:
                distinct = (
                    template.format(image_id="a", attribute="x") != template.format(image_id="b", attribute="x")
                    and template.format(image_id="a", attribute="x") != template.format(image_id="a", attribute="y")
                )
        except (AttributeError, IndexError, KeyError, TypeError, ValueError) as e:
            raise ParseError(f"Bad template {template!r}: {type(e).__name__}: {e}", path=sidecar, column=column) from e
        if not distinct:
            wanted = "{image_id}" if key == "segmentation" else "{image_id} and {attribute}"
            raise ParseError(f"Template {template!r} must use {wanted}", path=sidecar, column=column)

    return naming


def _enum_value(enum_type, raw: str, path: Path, row: int, column: str):
    if raw == "":
        raise MissingField(f"Empty {column}", path=path, row=row, column=column)
    try:
        return enum_type(raw)
    except ValueError:
        allowed = ", ".join(member.value for member in enum_type)
        raise ParseError(f"Unknown {column} {raw!r}; expected one of {allowed}", path=path, row=row, column=column)


def load_manifest(path: Path | str) -> DatasetManifest:
    """
    Load and validate a manifest CSV and its JSON sidecar.

    Mask paths in the CSV are resolved relative to the manifest directory.
    """
    path = Path(path)
    if not path.exists():
        raise MissingField("Manifest not found", path=path)

    sidecar = sidecar_path(path)
    meta = _load_sidecar(sidecar)

    try:
        task = Task(meta["task"])
    except (ValueError, TypeError):
        raise ParseError(f"Unknown task {meta['task']!r}", path=sidecar, column="task")

    attribute_names = _sidecar_attribute_names(meta, sidecar)
    if task is Task.ATTRIBUTES and not attribute_names:
        raise MissingField("Attributes manifest needs attribute_names", path=sidecar, column="attribute_names")

    threshold = _sidecar_threshold(meta, sidecar)
    naming = _sidecar_naming(meta, sidecar)

    expected_header = manifest_header(task, attribute_names)
    entries = []
    seen: set[str] = set()

    logger.info(f"Progress: loading manifest {path}")

    try:
        with open(path, "r", encoding="utf-8", newline="") as f:
            reader = csv.reader(f)
            header = tuple(next(reader, ()))
            if header != expected_header:
                raise HeaderMismatch(
                    f"Expected header {','.join(expected_header)!r}, got {','.join(header)!r}",
                    path=path,
                    row=1,
                )

            for row_number, row in enumerate(reader, start=2):
                if not row:
                    continue
                if len(row) != len(expected_header):
                    raise ParseError(
                        f"Expected {len(expected_header)} fields, got {len(row)}", path=path, row=row_number
                    )

                values = dict(zip(expected_header, row))
                image_id = values["image"].strip()
                if not image_id:
                    raise MissingField("Empty image id", path=path, row=row_number, column="image")
                if image_id in seen:
                    raise DuplicateImageId(f"Duplicate image id: {image_id}", path=path, row=row_number)
                seen.add(image_id)

                entries.append(_parse_manifest_row(task, values, path, row_number))
    except UnicodeDecodeError as e:
        raise ParseError(f"Not valid UTF-8: {e}", path=path) from e

    return DatasetManifest(
        task=task,
        entries=tuple(entries),
        attribute_names=attribute_names,
        threshold=threshold,
        naming=naming,
        digest=manifest_digest(path),
    )


def _parse_manifest_row(task: Task, values: dict[str, str], path: Path, row: int) -> ManifestEntry:
    image_id = values["image"].strip()

    def mask_path(column: str) -> Path:
        raw = values[column].strip()
        if not raw:
            raise MissingField(f"Empty {column}", path=path, row=row, column=column)
        return path.parent / raw

    match task:
        case Task.SEGMENTATION:
            return ManifestEntry(
                image_id=image_id,
                masks=(mask_path("mask"),),
                stratum=_enum_value(SegStratum, values["stratum"].strip(), path, row, "stratum"),
            )
        case Task.ATTRIBUTES:
            columns = [c for c in values if c.startswith("mask_")]
            return ManifestEntry(image_id=image_id, masks=tuple(mask_path(c) for c in columns))
        case Task.CLASSIFICATION:
            return ManifestEntry(
                image_id=image_id,
                label=_enum_value(DiagnosisClass, values["label"].strip(), path, row, "label"),
                partition=_enum_value(Partition, values["partition"].strip(), path, row, "partition"),
            )


def _relative_posix(p: Path, root: Path) -> str:
    try:
        return p.relative_to(root).as_posix()
    except ValueError:
        return p.as_posix()


def write_manifest(manifest: DatasetManifest, path: Path | str) -> Path:
    """
    Write a manifest CSV and sidecar. Mask paths under the manifest directory
    are stored relative to it; relative paths are written unchanged.
    """
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)

    header = manifest_header(manifest.task, manifest.attribute_names)

    with open(path, "w", encoding="utf-8", newline="") as f:
        writer = csv.writer(f, lineterminator="\n")
        writer.writerow(header)
        for entry in manifest:
            masks = [_relative_posix(Path(p), path.parent) for p in entry.masks]
            match manifest.task:
                case Task.SEGMENTATION:
                    writer.writerow([entry.image_id, entry.stratum.value, *masks])
                case Task.ATTRIBUTES:
                    writer.writerow([entry.image_id, *masks])
                case Task.CLASSIFICATION:
                    writer.writerow([entry.image_id, entry.label.value, entry.partition.value])

    meta = {
        "schema_version": MANIFEST_SCHEMA_VERSION,
        "task": manifest.task.value,
        "threshold": manifest.threshold,
        "attribute_names": list(manifest.attribute_names),
        "naming": dict(manifest.naming),
    }
    with open(sidecar_path(path), "w", encoding="utf-8") as f:
        json.dump(meta, f, ensure_ascii=False, indent=2)
        f.write("\n")

    logger.info(f"Progress: saved manifest {path}")

    return path


def load_mask(path: Path | str) -> BinaryMask:
    """Decode an 8-bit PNG; gray levels >= 128 are foreground."""
    path = Path(path)

    try:
        with Image.open(path) as image:
            if image.format != "PNG":
                raise UnsupportedFormat(f"Expected PNG, got {image.format}", path=path)
            if image.mode not in GRAY_CONVERTIBLE_MODES:
                raise UnsupportedFormat(f"Expected an 8-bit image, got mode {image.mode}", path=path)
            gray = np.asarray(image.convert("L"))
    except FileNotFoundError:
        raise MissingField("Mask file not found", path=path)
    except (UnidentifiedImageError, OSError, SyntaxError) as e:
        raise DecodeError(f"Cannot decode image: {e}", path=path) from e

    return BinaryMask(gray >= BINARIZE_LEVEL)


def save_mask(mask: BinaryMask, path: Path | str) -> Path:
    """Write a mask as a single-channel PNG with values 0 and 255."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(mask.bits.astype(np.uint8) * 255).save(path, format="PNG")
    return path


def discover_mask_files(submission_dir: Path) -> Iterator[Path]:
    """PNG files directly inside ``submission_dir``, in name order."""
    yield from sorted(p for p in submission_dir.glob("*.png") if p.is_file())


def expected_mask_files(manifest: DatasetManifest) -> dict[str, str | tuple[str, str]]:
    """File name -> image id (segmentation) or (image id, attribute)."""
    expected: dict[str, str | tuple[str, str]] = {}
    for image_id in manifest.image_ids():
        if manifest.task is Task.ATTRIBUTES:
            for attribute in manifest.attribute_names:
                expected[manifest.mask_filename(image_id, attribute)] = (image_id, attribute)
        else:
            expected[manifest.mask_filename(image_id)] = image_id
    return expected


def load_ground_truth(manifest: DatasetManifest, workers: int = 1) -> dict:
    """
    Decode every ground-truth mask the manifest references: image id -> mask
    for segmentation, (image id, attribute) -> mask for attributes.
    """
    if manifest.task is Task.CLASSIFICATION:
        raise ValueError("Classification manifests carry labels, not masks")

    jobs = []
    for entry in manifest:
        if manifest.task is Task.ATTRIBUTES:
            for attribute, mask_path in zip(manifest.attribute_names, entry.masks):
                jobs.append(((entry.image_id, attribute), mask_path))
        else:
            jobs.append((entry.image_id, entry.masks[0]))

    for key, mask_path in jobs:
        if not mask_path.exists():
            raise MissingField(f"Ground truth mask not found for {key}", path=mask_path)

    masks = ordered_map(lambda job: load_mask(job[1]), jobs, workers)

    return {key: mask for (key, _), mask in zip(jobs, masks)}


def load_segmentation_submission(
    submission_dir: Path | str,
    manifest: DatasetManifest,
    submission_id: str | None = None,
    workers: int = 1,
) -> SubmissionBundle:
    """
    Load one mask per manifest image (or per image and attribute). Missing
    files are an error; files the manifest does not name are reported as
    UnexpectedFile flags and skipped.
    """
    submission_dir = Path(submission_dir)
    if not submission_dir.is_dir():
        raise MissingField("Submission directory not found", path=submission_dir)

    expected = expected_mask_files(manifest)
    present = {p.name: p for p in discover_mask_files(submission_dir)}

    missing = [key for name, key in expected.items() if name not in present]
    if missing:
        ids = [key if isinstance(key, str) else f"{key[0]} ({key[1]})" for key in missing]
        raise MissingPrediction("No mask file for", ids, path=submission_dir)

    flags = []
    unexpected = sorted(p.name for p in submission_dir.iterdir() if p.name not in expected)
    for name in unexpected:
        logger.warning(f"UnexpectedFile: {submission_dir / name} is not named by the manifest")
        flags.append(Flag("UnexpectedFile", f"Ignored {name}"))

    names = list(expected)
    logger.info(f"Progress: loading {len(names)} masks from {submission_dir}")
    masks = ordered_map(lambda name: load_mask(present[name]), names, workers)

    loaded = {expected[name]: mask for name, mask in zip(names, masks)}
    bundle_id = submission_id or submission_dir.name

    if manifest.task is Task.ATTRIBUTES:
        return SubmissionBundle(bundle_id, manifest.task, attribute_masks=loaded, flags=tuple(flags))
    return SubmissionBundle(bundle_id, manifest.task, masks=loaded, flags=tuple(flags))


def parse_decimal(raw: str, path: Path, row: int, column: str) -> float:
    text = raw.strip()
    if not DECIMAL_PATTERN.fullmatch(text):
        raise ParseError(f"Not a decimal number: {raw!r}", path=path, row=row, column=column)

    value = float(text)
    if not 0.0 <= value <= 1.0:
        raise ValueOutOfRange(f"Probability {raw!r} outside [0, 1]", path=path, row=row, column=column)

    return value


def parse_classification_csv(path: Path | str, manifest: DatasetManifest) -> list[PredictionRecord]:
    """
    Parse a classification submission. The header must be exactly
    ``image,MEL,NV,BCC,AKIEC,BKL,DF,VASC``; one row per manifest image.
    Records are returned in ascending image id order.
    """
    path = Path(path)
    records: dict[str, PredictionRecord] = {}

    logger.info(f"Progress: parsing classification submission {path}")

    try:
        with open(path, "r", encoding="utf-8", newline="") as f:
            reader = csv.reader(f)
            header = tuple(next(reader, ()))
            if header != CLASSIFICATION_HEADER:
                raise HeaderMismatch(
                    f"Expected header {','.join(CLASSIFICATION_HEADER)!r}, got {','.join(header)!r}",
                    path=path,
                    row=1,
                )

            for row_number, row in enumerate(reader, start=2):
                if not row:
                    continue
                if len(row) != len(CLASSIFICATION_HEADER):
                    raise ParseError(
                        f"Expected {len(CLASSIFICATION_HEADER)} fields, got {len(row)}", path=path, row=row_number
                    )

                image_id = row[0].strip()
                if not image_id:
                    raise MissingField("Empty image id", path=path, row=row_number, column="image")
                if image_id in records:
                    raise DuplicateImageId(f"Duplicate image id: {image_id}", path=path, row=row_number)

                probs = [
                    parse_decimal(raw, path, row_number, column)
                    for raw, column in zip(row[1:], CLASSIFICATION_HEADER[1:])
                ]
                try:
                    records[image_id] = PredictionRecord(image_id=image_id, probs=tuple(probs))
                except InvalidProbability as e:
                    raise InvalidProbability(e.message, path=path, row=row_number) from e
    except UnicodeDecodeError as e:
        raise ParseError(f"Not valid UTF-8: {e}", path=path) from e

    extra = [image_id for image_id in records if image_id not in manifest]
    if extra:
        raise ExtraRows("Rows for images not in the manifest", extra, path=path)

    missing = [image_id for image_id in manifest.image_ids() if image_id not in records]
    if missing:
        raise MissingRows("No rows for", missing, path=path)

    return [records[image_id] for image_id in manifest.image_ids()]


def load_classification_submission(
    path: Path | str,
    manifest: DatasetManifest,
    submission_id: str | None = None,
) -> SubmissionBundle:
    path = Path(path)
    records = parse_classification_csv(path, manifest)
    return SubmissionBundle(
        submission_id=submission_id or path.stem,
        task=Task.CLASSIFICATION,
        records=tuple(records),
    )


def format_probability(value: float) -> str:
    return repr(float(value))


def write_classification_csv(records: Sequence[PredictionRecord], path: Path | str) -> Path:
    """Write records under the fixed header, sorted by image id."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)

    with open(path, "w", encoding="utf-8", newline="") as f:
        writer = csv.writer(f, lineterminator="\n")
        writer.writerow(CLASSIFICATION_HEADER)
        for record in sorted(records, key=lambda r: r.image_id):
            writer.writerow([record.image_id, *(format_probability(p) for p in record.probs)])

    return path


def load_submission(
    path: Path | str,
    manifest: DatasetManifest,
    submission_id: str | None = None,
    workers: int = 1,
) -> SubmissionBundle:
    """Load whichever submission kind the manifest's task calls for."""
    if manifest.task is Task.CLASSIFICATION:
        return load_classification_submission(path, manifest, submission_id)
    return load_segmentation_submission(path, manifest, submission_id, workers)
