"""
Cross-submission analysis: leaderboards under any metric, rank divergence
between two metrics, least-squares slopes against the failure rate, and
histograms of metric values or internal-minus-external gaps.

Every function here takes a complete list of SubmissionScore values and is
independent of the order of that list.
"""

import logging
import math
from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np
from scipy import stats

from lesion_bench.core_model import Flag, SubmissionScore
from lesion_bench.errors import (
    DegenerateFit,
    InsufficientData,
    MissingPartitionScores,
    UnknownMetric,
    ValidationError,
)

logger = logging.getLogger(__name__)

DEFAULT_BIN_WIDTH = 0.02

# Values this close to a bin edge (in bin widths) land in the upper bin, so
# 0.06 / 0.02 = 2.9999999999999996 is binned as 3.
BIN_EDGE_TOLERANCE = 1e-9

FAILURE_METRICS = ("jaccard", "thresholded_jaccard")

MAX_BINS = 10_000


@dataclass(frozen=True)
class LeaderboardRow:
    rank: int
    submission_id: str
    value: float


@dataclass(frozen=True)
class Leaderboard:
    metric_name: str
    rows: tuple[LeaderboardRow, ...]

    def rank_of(self, submission_id: str) -> int:
        for row in self.rows:
            if row.submission_id == submission_id:
                return row.rank
        raise KeyError(submission_id)


@dataclass(frozen=True)
class RankPair:
    submission_id: str
    rank_a: int
    rank_b: int


@dataclass(frozen=True)
class RankDivergence:
    metric_a: str
    metric_b: str
    pairs: tuple[RankPair, ...]
    spearman_rho: float | None
    flags: tuple[Flag, ...] = ()

    @property
    def off_diagonal(self) -> tuple[RankPair, ...]:
        return tuple(pair for pair in self.pairs if pair.rank_a != pair.rank_b)


@dataclass(frozen=True)
class SlopeFit:
    metric_name: str
    x_metric: str
    slope: float
    intercept: float
    n: int
    points: tuple[tuple[str, float, float], ...] = ()


@dataclass(frozen=True)
class Histogram:
    metric_name: str
    bin_width: float
    edges: tuple[float, ...]
    counts: tuple[int, ...]
    mean: float
    sd: float
    n: int


@dataclass(frozen=True)
class GeneralizationPoint:
    submission_id: str
    whole: float
    internal: float
    external: float
    gap: float


@dataclass(frozen=True)
class GeneralizationScatter:
    metric_name: str
    points: tuple[GeneralizationPoint, ...]
    internal_external_r: float | None


def metric_values(scores: Iterable[SubmissionScore], metric_name: str) -> dict[str, float]:
    """Submission id -> value, sorted by id; UnknownMetric if any submission lacks it."""
    values = {}
    for score in scores:
        if score.submission_id in values:
            raise ValidationError(f"Duplicate submission id: {score.submission_id}")
        values[score.submission_id] = score.metric(metric_name)
    return dict(sorted(values.items()))


def competition_ranks(values: dict[str, float]) -> dict[str, int]:
    """Higher is better; tied values share a rank and the next rank skips (1, 2, 2, 4)."""
    ordered = sorted(values.items(), key=lambda item: (-item[1], item[0]))

    ranks = {}
    previous = None
    rank = 0
    for position, (submission_id, value) in enumerate(ordered, start=1):
        if value != previous:
            rank = position
            previous = value
        ranks[submission_id] = rank

    return ranks


def build_leaderboard(scores: Iterable[SubmissionScore], metric_name: str) -> Leaderboard:
    values = metric_values(scores, metric_name)
    ranks = competition_ranks(values)

    rows = sorted(
        (LeaderboardRow(rank=ranks[sid], submission_id=sid, value=value) for sid, value in values.items()),
        key=lambda row: (row.rank, row.submission_id),
    )

    return Leaderboard(metric_name=metric_name, rows=tuple(rows))


def rank_divergence(
    scores: Sequence[SubmissionScore],
    metric_a: str,
    metric_b: str,
) -> RankDivergence:
    """
    Competition ranks under both metrics for every submission, plus Spearman's
    rho on the metric values (average ranks for ties).
    """
    values_a = metric_values(scores, metric_a)
    values_b = metric_values(scores, metric_b)

    ranks_a = competition_ranks(values_a)
    ranks_b = competition_ranks(values_b)

    pairs = tuple(
        RankPair(submission_id=sid, rank_a=ranks_a[sid], rank_b=ranks_b[sid])
        for sid in sorted(values_a, key=lambda s: (ranks_a[s], s))
    )

    rho = None
    flags = []
    a = np.asarray(list(values_a.values()), dtype=np.float64)
    b = np.asarray([values_b[sid] for sid in values_a], dtype=np.float64)

    if len(a) >= 2 and np.ptp(a) > 0 and np.ptp(b) > 0:
        rho = float(stats.spearmanr(a, b).statistic)
    else:
        flags.append(
            Flag("UndefinedCorrelation", f"Spearman rho of {metric_a} vs {metric_b} needs two distinct values per metric")
        )

    return RankDivergence(
        metric_a=metric_a,
        metric_b=metric_b,
        pairs=pairs,
        spearman_rho=rho,
        flags=tuple(flags),
    )


def metric_slope(scores: Sequence[SubmissionScore], x_metric: str, y_metric: str) -> SlopeFit:
    """Ordinary least squares of ``y_metric`` on ``x_metric`` across submissions."""
    xs = metric_values(scores, x_metric)
    ys = metric_values(scores, y_metric)

    x = np.asarray(list(xs.values()), dtype=np.float64)
    y = np.asarray([ys[sid] for sid in xs], dtype=np.float64)

    if len(x) < 2:
        raise InsufficientData(f"Need at least 2 submissions for a slope, got {len(x)}")
    if np.ptp(x) == 0:
        raise DegenerateFit(f"All submissions share {x_metric} = {x[0]}; slope undefined")

    fit = stats.linregress(x, y)

    return SlopeFit(
        metric_name=y_metric,
        x_metric=x_metric,
        slope=float(fit.slope),
        intercept=float(fit.intercept),
        n=len(x),
        points=tuple((sid, xs[sid], ys[sid]) for sid in xs),
    )


def failure_slope(scores: Sequence[SubmissionScore]) -> dict[str, SlopeFit]:
    """Slopes of Jaccard and Thresholded Jaccard against the failure rate."""
    return {name: metric_slope(scores, "failure_rate", name) for name in FAILURE_METRICS}


def histogram(values: Sequence[float], bin_width: float = DEFAULT_BIN_WIDTH, metric_name: str = "") -> Histogram:
    """
    Fixed-width bins with edges at integer multiples of ``bin_width``,
    contiguous from the lowest to the highest occupied bin. Each bin is
    [lower, upper). The standard deviation is the population one.
    """
    if not bin_width > 0 or not math.isfinite(bin_width):
        raise ValidationError(f"Bin width must be positive, got {bin_width!r}")

    label = metric_name or "metric"
    data = np.asarray(values, dtype=np.float64)
    if data.size == 0:
        raise InsufficientData(f"No values to histogram for {label}")
    if not np.isfinite(data).all():
        raise ValidationError(f"Cannot histogram non-finite values of {label}")

    scaled = np.floor(data / bin_width + BIN_EDGE_TOLERANCE)
    if (
        not np.isfinite(scaled).all()
        or np.abs(scaled).max() >= 2**53
        or scaled.max() - scaled.min() + 1 > MAX_BINS
    ):
        raise ValidationError(f"Bin width {bin_width!r} needs more than {MAX_BINS} bins for {label}")

    indices = scaled.astype(np.int64)
    low = int(indices.min())
    high = int(indices.max())

    counts = np.bincount(indices - low, minlength=high - low + 1)
    edges = tuple(float(k * bin_width) for k in range(low, high + 2))

    return Histogram(
        metric_name=metric_name,
        bin_width=bin_width,
        edges=edges,
        counts=tuple(int(c) for c in counts),
        mean=float(np.mean(data)),
        sd=float(np.std(data)),
        n=int(data.size),
    )


def metric_histogram(
    scores: Sequence[SubmissionScore],
    metric_name: str,
    bin_width: float = DEFAULT_BIN_WIDTH,
) -> Histogram:
    values = metric_values(scores, metric_name)
    return histogram(list(values.values()), bin_width, metric_name)


def partition_gaps(scores: Sequence[SubmissionScore], metric_name: str) -> dict[str, float]:
    gaps = {}
    for score in sorted(scores, key=lambda s: s.submission_id):
        try:
            internal = score.metric(f"INTERNAL.{metric_name}")
            external = score.metric(f"EXTERNAL.{metric_name}")
        except UnknownMetric as e:
            raise MissingPartitionScores(
                f"{score.submission_id} has no internal/external {metric_name}: {e.message}"
            ) from e
        gaps[score.submission_id] = internal - external
    return gaps


def gap_histogram(
    scores: Sequence[SubmissionScore],
    metric_name: str,
    bin_width: float = DEFAULT_BIN_WIDTH,
) -> Histogram:
    """Histogram of internal minus external ``metric_name`` across submissions."""
    gaps = partition_gaps(scores, metric_name)
    return histogram(list(gaps.values()), bin_width, f"GAP.{metric_name}")


def generalization_scatter(scores: Sequence[SubmissionScore], metric_name: str) -> GeneralizationScatter:
    """
    Whole-set value against the internal-minus-external gap per submission,
    with the internal-vs-external Pearson correlation for comparison.
    """
    gaps = partition_gaps(scores, metric_name)
    whole = metric_values(scores, metric_name)
    by_id = {score.submission_id: score for score in scores}

    points = tuple(
        GeneralizationPoint(
            submission_id=sid,
            whole=whole[sid],
            internal=by_id[sid].metric(f"INTERNAL.{metric_name}"),
            external=by_id[sid].metric(f"EXTERNAL.{metric_name}"),
            gap=gap,
        )
        for sid, gap in gaps.items()
    )

    internal = np.asarray([p.internal for p in points], dtype=np.float64)
    external = np.asarray([p.external for p in points], dtype=np.float64)

    r = None
    if len(points) >= 2 and np.ptp(internal) > 0 and np.ptp(external) > 0:
        r = float(stats.pearsonr(internal, external).statistic)

    return GeneralizationScatter(metric_name=metric_name, points=points, internal_external_r=r)


def top_table(
    scores: Sequence[SubmissionScore],
    metric_name: str,
    columns: Sequence[str],
    n: int = 5,
) -> list[dict[str, object]]:
    """
    The best ``n`` submissions by ``metric_name`` with the requested extra
    columns; undefined column values are None.
    """
    leaderboard = build_leaderboard(scores, metric_name)
    by_id = {score.submission_id: score for score in scores}

    table = []
    for row in leaderboard.rows[:n]:
        entry: dict[str, object] = {"rank": row.rank, "submission_id": row.submission_id}
        for column in columns:
            score = by_id[row.submission_id]
            entry[column] = score.metric(column) if score.has_metric(column) else None
        table.append(entry)

    return table
