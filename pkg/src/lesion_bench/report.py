"""
Report serialization.

Every scoring run produces two files next to each other:
- ``<submission>.report.json``: the nested metric tree, validated against
  the shipped ``schemas/report.schema.json`` before it is written
- ``<submission>.images.csv``: one row per scored image (or image and
  attribute) for spreadsheets

JSON output is canonical: keys keep a fixed insertion order, floats use the
shortest round-trip representation and NaN is written as null, so identical
inputs give byte-identical files.
"""

import csv
import json
import logging
import math
from collections.abc import Mapping, Sequence
from dataclasses import dataclass, field
from enum import Enum
from importlib import resources
from pathlib import Path
from typing import Any

import numpy as np
from jsonschema import Draft7Validator
from lxml import etree

from lesion_bench import __version__
from lesion_bench.classification_metrics import (
    GAP_SCOPE,
    METRIC_NAMES,
    ClassificationResult,
    ClsReport,
    ConfusionMatrix,
    Scope,
)
from lesion_bench.core_model import (
    DIAGNOSIS_CLASSES,
    DatasetManifest,
    Flag,
    SegStratum,
    SubmissionScore,
    Task,
)
from lesion_bench.errors import LesionBenchError, ParseError
from lesion_bench.mask_metrics import AttributeResult, SegmentationResult, jaccard
from lesion_bench.ranking_analysis import (
    GeneralizationScatter,
    Histogram,
    Leaderboard,
    RankDivergence,
    SlopeFit,
)

logger = logging.getLogger(__name__)

REPORT_SCHEMA_VERSION = 1
REPORT_SUFFIX = ".report.json"
IMAGES_SUFFIX = ".images.csv"

SEGMENTATION_METRICS = ("thresholded_jaccard", "jaccard", "failure_rate")

HEADLINE_METRICS = {
    Task.SEGMENTATION: "thresholded_jaccard",
    Task.ATTRIBUTES: "mean_jaccard",
    Task.CLASSIFICATION: "bacc",
}

SVG_NS = "http://www.w3.org/2000/svg"
SVG_WIDTH = 480
SVG_HEIGHT = 240
SVG_MARGIN = 30


def canonical(value: Any) -> Any:
    """Plain JSON types only: numpy scalars unwrapped, enums by value, NaN as None."""
    match value:
        case Enum():
            return value.value
        case bool() | None | str():
            return value
        case Path():
            return value.as_posix()
        case np.bool_():
            return bool(value)
        case int() | np.integer():
            return int(value)
        case float() | np.floating():
            number = float(value)
            return number if math.isfinite(number) else None
        case Mapping():
            return {str(canonical(k)): canonical(v) for k, v in value.items()}
        case list() | tuple() | np.ndarray():
            return [canonical(v) for v in value]
    raise TypeError(f"Cannot serialize {type(value).__name__} to JSON")


def canonical_json(data: Any) -> str:
    return json.dumps(canonical(data), indent=2, ensure_ascii=False, allow_nan=False) + "\n"


def write_json(data: Any, path: Path | str) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(canonical_json(data), encoding="utf-8")
    return path


def load_report_schema() -> dict:
    schema_file = resources.files("lesion_bench") / "schemas" / "report.schema.json"
    return json.loads(schema_file.read_text(encoding="utf-8"))


def schema_errors(data: Any) -> list[str]:
    """Schema violations as ``path: message`` strings, in document order."""
    validator = Draft7Validator(load_report_schema())
    errors = sorted(validator.iter_errors(data), key=lambda e: [str(p) for p in e.absolute_path])
    return [f"{'/'.join(str(p) for p in e.absolute_path) or '<root>'}: {e.message}" for e in errors]


@dataclass(frozen=True)
class ReportDocument:
    task: Task
    submission_id: str
    manifest_digest: str
    results: dict[str, Any]
    images: list[dict[str, Any]] = field(default_factory=list)
    flags: tuple[Flag, ...] = ()
    schema_version: int = REPORT_SCHEMA_VERSION
    tool_version: str = __version__

    def to_dict(self) -> dict[str, Any]:
        return canonical(
            {
                "schema_version": self.schema_version,
                "tool_version": self.tool_version,
                "task": self.task,
                "submission_id": self.submission_id,
                "manifest_digest": self.manifest_digest,
                "results": self.results,
                "images": self.images,
                "flags": [flag.to_dict() for flag in self.flags],
            }
        )

    def to_json(self) -> str:
        return canonical_json(self.to_dict())

    @classmethod
    def from_dict(cls, data: Mapping[str, Any]) -> "ReportDocument":
        return cls(
            task=Task(data["task"]),
            submission_id=data["submission_id"],
            manifest_digest=data["manifest_digest"],
            results=data["results"],
            images=list(data["images"]),
            flags=tuple(Flag.from_dict(f) for f in data["flags"]),
            schema_version=data["schema_version"],
            tool_version=data["tool_version"],
        )


def segmentation_report(
    submission_id: str,
    manifest: DatasetManifest,
    result: SegmentationResult,
    flags: Sequence[Flag] = (),
) -> ReportDocument:
    report = result.report

    strata = {}
    for stratum in SegStratum:
        summary = report.per_stratum.get(stratum)
        if summary is None:
            continue
        strata[stratum.value] = {
            "thresholded_jaccard": summary.thresholded_jaccard,
            "jaccard": summary.jaccard,
            "failure_rate": summary.failure_rate,
            "n": summary.n,
        }

    results = {
        "threshold": report.threshold,
        "n_images": report.n_images,
        "aggregates": {
            "thresholded_jaccard": report.mean_thresholded_jaccard,
            "jaccard": report.mean_jaccard,
            "failure_rate": report.failure_rate,
        },
        "strata": strata,
    }

    images = [
        {
            "image_id": image.image_id,
            "jaccard": image.jaccard,
            "thresholded_jaccard": image.thresholded_jaccard,
            "failed": image.failed,
            "stratum": image.stratum,
            **image.counts.to_dict(),
        }
        for image in result.images
    ]

    return ReportDocument(
        task=Task.SEGMENTATION,
        submission_id=submission_id,
        manifest_digest=manifest.digest,
        results=results,
        images=images,
        flags=(*flags, *result.flags),
    )


def attribute_report(
    submission_id: str,
    manifest: DatasetManifest,
    result: AttributeResult,
    flags: Sequence[Flag] = (),
) -> ReportDocument:
    aggregates: dict[str, float | None] = {"mean_jaccard": result.mean}
    for attribute in manifest.attribute_names:
        aggregates[f"jaccard_{attribute}"] = result.per_attribute[attribute]

    attributes = {
        attribute: {"jaccard": result.per_attribute[attribute], **result.totals[attribute].to_dict()}
        for attribute in manifest.attribute_names
    }

    images = [
        {
            "image_id": image_id,
            "attribute": attribute,
            "jaccard": jaccard(counts),
            **counts.to_dict(),
        }
        for (image_id, attribute), counts in sorted(result.per_image.items())
    ]

    return ReportDocument(
        task=Task.ATTRIBUTES,
        submission_id=submission_id,
        manifest_digest=manifest.digest,
        results={"aggregates": aggregates, "attributes": attributes},
        images=images,
        flags=(*flags, *result.flags),
    )


def _scope_block(report: ClsReport | None) -> dict[str, Any]:
    if report is None:
        return {
            "n": 0,
            "metrics": {name: None for name in METRIC_NAMES},
            "confusion": {
                "labels": [c.value for c in DIAGNOSIS_CLASSES],
                "counts": ConfusionMatrix(np.zeros((len(DIAGNOSIS_CLASSES),) * 2)).to_list(),
            },
            "roc": {},
        }

    return {
        "n": report.n,
        "metrics": report.metrics(),
        "confusion": {"labels": list(report.confusion.labels), "counts": report.confusion.to_list()},
        "roc": {
            cls.value: [list(point) for point in report.roc[cls].points]
            for cls in DIAGNOSIS_CLASSES
            if cls in report.roc
        },
    }


def classification_report(
    submission_id: str,
    manifest: DatasetManifest,
    result: ClassificationResult,
    records: Sequence,
    flags: Sequence[Flag] = (),
) -> ReportDocument:
    scopes = {scope.value: _scope_block(result.reports.get(scope)) for scope in Scope}
    aggregates = scopes[Scope.ALL.value]["metrics"]

    by_id = {record.image_id: record for record in records}
    images = []
    for image_id in manifest.image_ids():
        entry = manifest.entry(image_id)
        row: dict[str, Any] = {
            "image_id": image_id,
            "label": entry.label,
            "partition": entry.partition,
            "decision": result.decisions[image_id],
        }
        for cls, p in zip(DIAGNOSIS_CLASSES, by_id[image_id].probs):
            row[cls.value] = p
        images.append(row)

    return ReportDocument(
        task=Task.CLASSIFICATION,
        submission_id=submission_id,
        manifest_digest=manifest.digest,
        results={"aggregates": dict(aggregates), "scopes": scopes, "gaps": result.gaps},
        images=images,
        flags=(*flags, *result.flags),
    )


def _csv_value(value: Any) -> str:
    value = canonical(value)
    match value:
        case None:
            return ""
        case bool():
            return "true" if value else "false"
        case float():
            return repr(value)
    return str(value)


def write_images_csv(document: ReportDocument, path: Path | str) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)

    columns: list[str] = []
    for image in document.images:
        for key in image:
            if key not in columns:
                columns.append(key)
    if not columns:
        columns = ["image_id"]

    with open(path, "w", encoding="utf-8", newline="") as f:
        writer = csv.writer(f, lineterminator="\n")
        writer.writerow(columns)
        for image in document.images:
            writer.writerow([_csv_value(image.get(column)) for column in columns])

    return path


def report_paths(out_dir: Path | str, submission_id: str) -> tuple[Path, Path]:
    out_dir = Path(out_dir)
    return out_dir / f"{submission_id}{REPORT_SUFFIX}", out_dir / f"{submission_id}{IMAGES_SUFFIX}"


def write_report(document: ReportDocument, out_dir: Path | str) -> tuple[Path, Path]:
    """Validate and write the JSON report and its per-image CSV companion."""
    data = document.to_dict()
    errors = schema_errors(data)
    if errors:
        raise LesionBenchError(f"Report for {document.submission_id} violates the report schema: {errors[0]}")

    json_path, csv_path = report_paths(out_dir, document.submission_id)
    write_json(data, json_path)
    write_images_csv(document, csv_path)

    logger.info(f"Progress: saved report {json_path}")

    return json_path, csv_path


def load_report(path: Path | str) -> ReportDocument:
    path = Path(path)
    try:
        with open(path, "r", encoding="utf-8") as f:
            data = json.load(f)
    except (json.JSONDecodeError, UnicodeDecodeError) as e:
        raise ParseError(f"Invalid JSON: {e}", path=path) from e

    errors = schema_errors(data)
    if errors:
        raise ParseError(f"Not a valid report: {errors[0]}", path=path)

    return ReportDocument.from_dict(data)


def _image_key(image: Mapping[str, Any]) -> str:
    if "attribute" in image:
        return f"{image['image_id']}/{image['attribute']}"
    return image["image_id"]


def submission_score(document: ReportDocument) -> SubmissionScore:
    """Flatten a report into the metric bundle ranking works on."""
    results = document.results
    scopes: dict[str, dict[str, float | None]] = {}

    match document.task:
        case Task.SEGMENTATION:
            for stratum, values in results["strata"].items():
                scopes[stratum] = {name: values[name] for name in SEGMENTATION_METRICS}
        case Task.CLASSIFICATION:
            for scope, block in results["scopes"].items():
                scopes[scope] = dict(block["metrics"])
            scopes[GAP_SCOPE] = dict(results["gaps"])

    return SubmissionScore(
        submission_id=document.submission_id,
        task=document.task,
        aggregates=dict(results["aggregates"]),
        scopes=scopes,
        per_image={_image_key(image): image for image in document.images},
        flags=document.flags,
    )


def load_submission_score(path: Path | str) -> SubmissionScore:
    return submission_score(load_report(path))


def top_columns(task: Task, scores: Sequence[SubmissionScore]) -> list[str]:
    """Extra columns for the top-N table of a task."""
    match task:
        case Task.SEGMENTATION:
            columns = list(SEGMENTATION_METRICS)
            for stratum in SegStratum:
                columns.extend(f"{stratum.value}.{name}" for name in SEGMENTATION_METRICS)
            return columns
        case Task.ATTRIBUTES:
            names = sorted({name for score in scores for name in score.aggregates})
            return ["mean_jaccard", *(name for name in names if name != "mean_jaccard")]
        case Task.CLASSIFICATION:
            columns = list(METRIC_NAMES)
            for scope in (Scope.INTERNAL.value, Scope.EXTERNAL.value, GAP_SCOPE):
                columns.extend(f"{scope}.{name}" for name in ("bacc", "acc", "mean_auc"))
            return columns


def leaderboard_to_dict(leaderboard: Leaderboard) -> dict[str, Any]:
    return {
        "metric": leaderboard.metric_name,
        "rows": [
            {"rank": row.rank, "submission_id": row.submission_id, "value": row.value}
            for row in leaderboard.rows
        ],
    }


def write_leaderboard_csv(leaderboard: Leaderboard, path: Path | str) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8", newline="") as f:
        writer = csv.writer(f, lineterminator="\n")
        writer.writerow(["rank", "submission_id", leaderboard.metric_name])
        for row in leaderboard.rows:
            writer.writerow([row.rank, row.submission_id, _csv_value(row.value)])
    return path


def divergence_to_dict(divergence: RankDivergence) -> dict[str, Any]:
    return {
        "metric_a": divergence.metric_a,
        "metric_b": divergence.metric_b,
        "spearman_rho": divergence.spearman_rho,
        "pairs": [
            {"submission_id": p.submission_id, "rank_a": p.rank_a, "rank_b": p.rank_b}
            for p in divergence.pairs
        ],
        "off_diagonal": [p.submission_id for p in divergence.off_diagonal],
        "flags": [flag.to_dict() for flag in divergence.flags],
    }


def slope_to_dict(fit: SlopeFit) -> dict[str, Any]:
    return {
        "metric": fit.metric_name,
        "x_metric": fit.x_metric,
        "slope": fit.slope,
        "intercept": fit.intercept,
        "n": fit.n,
        "points": [{"submission_id": sid, "x": x, "y": y} for sid, x, y in fit.points],
    }


def histogram_to_dict(histogram: Histogram) -> dict[str, Any]:
    return {
        "metric": histogram.metric_name,
        "bin_width": histogram.bin_width,
        "edges": list(histogram.edges),
        "counts": list(histogram.counts),
        "mean": histogram.mean,
        "sd": histogram.sd,
        "n": histogram.n,
    }


def scatter_to_dict(scatter: GeneralizationScatter) -> dict[str, Any]:
    return {
        "metric": scatter.metric_name,
        "internal_external_r": scatter.internal_external_r,
        "points": [
            {
                "submission_id": p.submission_id,
                "whole": p.whole,
                "internal": p.internal,
                "external": p.external,
                "gap": p.gap,
            }
            for p in scatter.points
        ],
    }


def _fmt(value: float) -> str:
    return f"{value:.3f}"


def histogram_svg(histogram: Histogram) -> bytes:
    """
    Bars for the bin counts, a solid rule at the mean and dotted rules one
    standard deviation either side.
    """
    plot_w = SVG_WIDTH - 2 * SVG_MARGIN
    plot_h = SVG_HEIGHT - 2 * SVG_MARGIN
    low = histogram.edges[0]
    span = histogram.edges[-1] - low
    tallest = max(histogram.counts) or 1

    def x_of(value: float) -> float:
        return SVG_MARGIN + (value - low) / span * plot_w

    root = etree.Element(
        f"{{{SVG_NS}}}svg",
        nsmap={None: SVG_NS},
        width=str(SVG_WIDTH),
        height=str(SVG_HEIGHT),
        viewBox=f"0 0 {SVG_WIDTH} {SVG_HEIGHT}",
    )
    title = etree.SubElement(root, f"{{{SVG_NS}}}title")
    title.text = f"{histogram.metric_name} (n={histogram.n}, mean={histogram.mean:.4f}, sd={histogram.sd:.4f})"

    bars = etree.SubElement(root, f"{{{SVG_NS}}}g", fill="#888888", stroke="#ffffff")
    for i, count in enumerate(histogram.counts):
        height = count / tallest * plot_h
        etree.SubElement(
            bars,
            f"{{{SVG_NS}}}rect",
            x=_fmt(x_of(histogram.edges[i])),
            y=_fmt(SVG_MARGIN + plot_h - height),
            width=_fmt(x_of(histogram.edges[i + 1]) - x_of(histogram.edges[i])),
            height=_fmt(height),
        )

    rules = etree.SubElement(root, f"{{{SVG_NS}}}g", stroke="#000000")
    for value, dashed in (
        (histogram.mean, False),
        (histogram.mean - histogram.sd, True),
        (histogram.mean + histogram.sd, True),
    ):
        line = etree.SubElement(
            rules,
            f"{{{SVG_NS}}}line",
            x1=_fmt(x_of(value)),
            y1=_fmt(SVG_MARGIN),
            x2=_fmt(x_of(value)),
            y2=_fmt(SVG_MARGIN + plot_h),
        )
        if dashed:
            line.set("stroke-dasharray", "2,2")

    etree.SubElement(
        root,
        f"{{{SVG_NS}}}line",
        x1=_fmt(SVG_MARGIN),
        y1=_fmt(SVG_MARGIN + plot_h),
        x2=_fmt(SVG_MARGIN + plot_w),
        y2=_fmt(SVG_MARGIN + plot_h),
        stroke="#000000",
    )
    for edge, anchor in ((histogram.edges[0], "start"), (histogram.edges[-1], "end")):
        label = etree.SubElement(
            root,
            f"{{{SVG_NS}}}text",
            x=_fmt(x_of(edge)),
            y=_fmt(SVG_HEIGHT - SVG_MARGIN / 3),
        )
        label.set("text-anchor", anchor)
        label.set("font-size", "10")
        label.text = repr(round(edge, 10))

    return etree.tostring(root, xml_declaration=True, encoding="UTF-8", pretty_print=True)


def write_histogram(histogram: Histogram, out_dir: Path | str, stem: str) -> tuple[Path, Path]:
    """``<stem>.json`` with the bins and ``<stem>.svg`` with the picture."""
    out_dir = Path(out_dir)
    json_path = write_json(histogram_to_dict(histogram), out_dir / f"{stem}.json")
    svg_path = out_dir / f"{stem}.svg"
    svg_path.write_bytes(histogram_svg(histogram))
    return json_path, svg_path
