"""
CLI for lesion-bench challenge scoring.

Usage:
    lesion-bench score-seg manifest.csv submissions/team_a -o reports
    lesion-bench score-attr manifest.csv submissions/team_a -o reports
    lesion-bench score-cls manifest.csv team_a.csv -o reports
    lesion-bench rank 'reports/*.report.json' --metric bacc --compare-metric acc -o ranking
    lesion-bench synth config.json --out-dir synthetic
    lesion-bench derive-threshold 0.743 0.754 0.861

Diagnostics go to stderr as ``LEVEL: code: message``. Exit codes: 0 on
success, 2 when an input fails validation, 1 on any other error.
"""

import functools
import glob
import logging
import sys
from pathlib import Path

import click

from lesion_bench import __version__
from lesion_bench.classification_metrics import score_classification
from lesion_bench.core_model import DatasetManifest, SubmissionScore, Task
from lesion_bench.dataset_io import (
    load_classification_submission,
    load_ground_truth,
    load_manifest,
    load_segmentation_submission,
)
from lesion_bench.errors import (
    DegenerateFit,
    InsufficientData,
    LesionBenchError,
    MissingPartitionScores,
    ValidationError,
)
from lesion_bench.mask_metrics import aggregate_attribute_jaccard, derive_threshold, score_segmentation
from lesion_bench.parallel import THREADS_ENV_VAR, resolve_workers
from lesion_bench.ranking_analysis import (
    DEFAULT_BIN_WIDTH,
    build_leaderboard,
    failure_slope,
    gap_histogram,
    generalization_scatter,
    metric_histogram,
    rank_divergence,
    top_table,
)
from lesion_bench.report import (
    HEADLINE_METRICS,
    REPORT_SUFFIX,
    ReportDocument,
    attribute_report,
    classification_report,
    divergence_to_dict,
    leaderboard_to_dict,
    load_submission_score,
    scatter_to_dict,
    segmentation_report,
    slope_to_dict,
    top_columns,
    write_histogram,
    write_json,
    write_leaderboard_csv,
    write_report,
)
from lesion_bench.synth import load_synth_config, write_synthetic_dataset

logger = logging.getLogger(__name__)

DEFAULT_REPORT_DIR = Path("reports")
DEFAULT_RANKING_DIR = Path("ranking")
DEFAULT_TOP_N = 5


def handle_errors(command):
    """Turn library errors into one diagnostic line and the matching exit code."""

    @functools.wraps(command)
    def wrapper(*args, **kwargs):
        try:
            return command(*args, **kwargs)
        except (click.ClickException, click.exceptions.Exit, click.Abort):
            raise
        except LesionBenchError as e:
            logger.error(f"{e.code}: {e}")
            sys.exit(e.exit_code)
        except Exception as e:
            logger.debug("InternalError: unhandled exception", exc_info=True)
            logger.error(f"InternalError: {type(e).__name__}: {e}")
            sys.exit(1)

    return wrapper


def workers_option(command):
    return click.option(
        "--workers", "-w",
        type=click.IntRange(min=1),
        default=None,
        help=f"Worker threads for per-image work, at most ${THREADS_ENV_VAR} when set (default: CPU count, max 8)",
    )(command)


def out_option(default: Path, help_text: str):
    return click.option(
        "--out", "-o",
        type=click.Path(file_okay=False, path_type=Path),
        default=default,
        help=f"{help_text} (default: {default})",
    )


def submission_id_option(command):
    return click.option(
        "--submission-id", "-s",
        default=None,
        help="Submission id for the report (default: submission file or directory name)",
    )(command)


def require_task(manifest: DatasetManifest, task: Task, manifest_path: Path) -> None:
    if manifest.task is not task:
        raise ValidationError(
            f"Manifest is for {manifest.task.value}, this command scores {task.value}",
            path=manifest_path,
        )


def emit_report(document: ReportDocument, out: Path) -> None:
    json_path, csv_path = write_report(document, out)
    click.echo(f"Report: {json_path}")
    click.echo(f"Per-image: {csv_path}")


@click.group()
@click.version_option(__version__, prog_name="lesion-bench")
@click.option("--verbose", "-v", is_flag=True, help="Log per-image detail.")
def cli(verbose: bool):
    """Lesion analysis challenge scoring CLI."""
    logging.basicConfig(
        level=logging.INFO,
        format="%(levelname)s: %(message)s",
        stream=sys.stderr,
        force=True,
    )
    logging.getLogger("lesion_bench").setLevel(logging.DEBUG if verbose else logging.INFO)


@cli.command("score-seg")
@click.argument("manifest_path", type=click.Path(path_type=Path))
@click.argument("submission_dir", type=click.Path(path_type=Path))
@click.option(
    "--threshold", "-t",
    type=float,
    default=None,
    help="Failure threshold T (default: the manifest's, normally 0.65)",
)
@out_option(DEFAULT_REPORT_DIR, "Directory for the JSON report and per-image CSV")
@submission_id_option
@workers_option
@handle_errors
def score_seg_command(
    manifest_path: Path,
    submission_dir: Path,
    threshold: float | None,
    out: Path,
    submission_id: str | None,
    workers: int | None,
):
    """Score a directory of lesion segmentation masks."""
    workers = resolve_workers(workers)

    manifest = load_manifest(manifest_path)
    require_task(manifest, Task.SEGMENTATION, manifest_path)

    truth = load_ground_truth(manifest, workers)
    bundle = load_segmentation_submission(submission_dir, manifest, submission_id, workers)

    result = score_segmentation(
        manifest,
        truth,
        bundle.masks,
        threshold=manifest.threshold if threshold is None else threshold,
        workers=workers,
    )

    report = result.report
    click.echo(
        f"{bundle.submission_id}: TJ={report.mean_thresholded_jaccard:.4f} "
        f"J={report.mean_jaccard:.4f} F={report.failure_rate:.4f} (T={report.threshold})"
    )
    emit_report(segmentation_report(bundle.submission_id, manifest, result, bundle.flags), out)


@cli.command("score-attr")
@click.argument("manifest_path", type=click.Path(path_type=Path))
@click.argument("submission_dir", type=click.Path(path_type=Path))
@out_option(DEFAULT_REPORT_DIR, "Directory for the JSON report and per-image CSV")
@submission_id_option
@workers_option
@handle_errors
def score_attr_command(
    manifest_path: Path,
    submission_dir: Path,
    out: Path,
    submission_id: str | None,
    workers: int | None,
):
    """Score a directory of lesion attribute masks."""
    workers = resolve_workers(workers)

    manifest = load_manifest(manifest_path)
    require_task(manifest, Task.ATTRIBUTES, manifest_path)

    truth = load_ground_truth(manifest, workers)
    bundle = load_segmentation_submission(submission_dir, manifest, submission_id, workers)

    result = aggregate_attribute_jaccard(manifest, truth, bundle.attribute_masks, workers=workers)

    click.echo(f"{bundle.submission_id}: mean Jaccard={result.mean:.4f}")
    for attribute, value in result.per_attribute.items():
        click.echo(f"  {attribute}: {value:.4f}")
    emit_report(attribute_report(bundle.submission_id, manifest, result, bundle.flags), out)


@cli.command("score-cls")
@click.argument("manifest_path", type=click.Path(path_type=Path))
@click.argument("csv_path", type=click.Path(path_type=Path))
@out_option(DEFAULT_REPORT_DIR, "Directory for the JSON report and per-image CSV")
@submission_id_option
@workers_option
@handle_errors
def score_cls_command(
    manifest_path: Path,
    csv_path: Path,
    out: Path,
    submission_id: str | None,
    workers: int | None,
):
    """Score a disease classification CSV."""
    workers = resolve_workers(workers)

    manifest = load_manifest(manifest_path)
    require_task(manifest, Task.CLASSIFICATION, manifest_path)

    bundle = load_classification_submission(csv_path, manifest, submission_id)
    result = score_classification(manifest, bundle.records, workers=workers)

    for scope, report in result.reports.items():
        click.echo(
            f"{bundle.submission_id} {scope.value}: BACC={report.bacc:.4f} ACC={report.acc:.4f} n={report.n}"
        )
    emit_report(classification_report(bundle.submission_id, manifest, result, bundle.records), out)


def expand_report_paths(patterns: tuple[str, ...]) -> list[Path]:
    """Glob patterns, plain files, or directories holding ``*.report.json``."""
    paths: set[Path] = set()
    for pattern in patterns:
        candidate = Path(pattern)
        if candidate.is_dir():
            paths.update(candidate.glob(f"*{REPORT_SUFFIX}"))
        elif candidate.is_file():
            paths.add(candidate)
        else:
            paths.update(Path(p) for p in glob.glob(pattern, recursive=True))
    return sorted(paths)


def load_scores(patterns: tuple[str, ...]) -> list[SubmissionScore]:
    paths = expand_report_paths(patterns)
    if not paths:
        raise InsufficientData(f"No reports match {' '.join(patterns)}")

    logger.info(f"Progress: loading {len(paths)} reports")
    scores = [load_submission_score(path) for path in paths]

    tasks = sorted({score.task.value for score in scores})
    if len(tasks) > 1:
        raise ValidationError(f"Reports mix tasks: {', '.join(tasks)}")

    return scores


@cli.command("rank")
@click.argument("reports", nargs=-1, required=True)
@click.option("--metric", "-m", default=None, help="Ranking metric, e.g. bacc or INTERNAL.bacc (default: the task's headline)")
@click.option("--compare-metric", "-c", default=None, help="Second metric for rank divergence, e.g. acc")
@click.option(
    "--bin-width",
    type=click.FloatRange(min=0, min_open=True),
    default=DEFAULT_BIN_WIDTH,
    help=f"Histogram bin width (default: {DEFAULT_BIN_WIDTH})",
)
@click.option("--top", "top_n", type=click.IntRange(min=1), default=DEFAULT_TOP_N, help="Rows in the top table")
@out_option(DEFAULT_RANKING_DIR, "Directory for leaderboard and analysis files")
@handle_errors
def rank_command(
    reports: tuple[str, ...],
    metric: str | None,
    compare_metric: str | None,
    bin_width: float,
    top_n: int,
    out: Path,
):
    """Rank submissions from their reports and compare metrics."""
    scores = load_scores(reports)
    task = scores[0].task
    metric = metric or HEADLINE_METRICS[task]

    leaderboard = build_leaderboard(scores, metric)
    write_json(leaderboard_to_dict(leaderboard), out / "leaderboard.json")
    write_leaderboard_csv(leaderboard, out / "leaderboard.csv")

    click.echo(f"Leaderboard by {metric}:")
    for row in leaderboard.rows:
        click.echo(f"  {row.rank:>3}  {row.submission_id}  {row.value!r}")

    write_histogram(metric_histogram(scores, metric, bin_width), out, "histogram")
    write_json(top_table(scores, metric, top_columns(task, scores), n=top_n), out / "top.json")

    if compare_metric:
        divergence = rank_divergence(scores, metric, compare_metric)
        write_json(divergence_to_dict(divergence), out / "divergence.json")
        click.echo(
            f"Rank divergence {metric} vs {compare_metric}: rho={divergence.spearman_rho}, "
            f"{len(divergence.off_diagonal)} of {len(divergence.pairs)} submissions change rank"
        )
        for flag in divergence.flags:
            logger.warning(f"{flag.code}: {flag.message}")

    if task is Task.SEGMENTATION:
        try:
            slopes = failure_slope(scores)
        except (InsufficientData, DegenerateFit) as e:
            logger.warning(f"{e.code}: failure slopes skipped: {e.message}")
        else:
            write_json({name: slope_to_dict(fit) for name, fit in slopes.items()}, out / "failure_slopes.json")
            for name, fit in slopes.items():
                click.echo(f"Slope of {name} vs failure rate: {fit.slope!r}")

    if task is Task.CLASSIFICATION and "." not in metric:
        try:
            gaps = gap_histogram(scores, metric, bin_width)
            scatter = generalization_scatter(scores, metric)
        except MissingPartitionScores as e:
            logger.warning(f"{e.code}: generalization analysis skipped: {e.message}")
        else:
            write_histogram(gaps, out, "gap_histogram")
            write_json(scatter_to_dict(scatter), out / "generalization.json")
            click.echo(f"Internal minus external {metric}: mean={gaps.mean!r} sd={gaps.sd!r}")

    logger.info(f"Progress: saved ranking to {out}")


@cli.command("synth")
@click.argument("config_path", type=click.Path(path_type=Path))
@click.option(
    "--out-dir", "-o",
    type=click.Path(file_okay=False, path_type=Path),
    required=True,
    help="Directory for the generated dataset and submissions",
)
@handle_errors
def synth_command(config_path: Path, out_dir: Path):
    """Generate a deterministic synthetic dataset from a JSON config."""
    config = load_synth_config(config_path)
    manifests = write_synthetic_dataset(config, out_dir)

    for task, manifest_path in manifests.items():
        click.echo(f"{task}: {manifest_path}")


@cli.command("derive-threshold")
@click.argument("values", nargs=-1, type=float, required=True)
@handle_errors
def derive_threshold_command(values: tuple[float, ...]):
    """Derive the failure threshold from interobserver Jaccard values."""
    derivation = derive_threshold(values)

    click.echo(f"threshold: {derivation.threshold!r}")
    click.echo(f"mean: {derivation.mean!r}")
    click.echo(f"range: {derivation.range!r}")
