"""
Ordered fan-out for per-image work.

Results always come back in input order, so anything aggregated from them
is identical to a sequential run regardless of the worker count.
"""

import logging
import os
from concurrent.futures import ThreadPoolExecutor
from typing import Callable, Sequence, TypeVar

logger = logging.getLogger(__name__)

THREADS_ENV_VAR = "LESION_BENCH_THREADS"
MAX_DEFAULT_WORKERS = 8

T = TypeVar("T")
R = TypeVar("R")


def env_workers() -> int | None:
    """The thread cap set by LESION_BENCH_THREADS, or None when unset or invalid."""
    value = os.getenv(THREADS_ENV_VAR)
    if value is None or not value.strip():
        return None

    try:
        workers = int(value)
    except ValueError:
        workers = 0

    if workers < 1:
        logger.warning(f"InvalidConfig: ignoring {THREADS_ENV_VAR}={value!r}, expected a positive integer")
        return None
    return workers


def default_workers() -> int:
    """Worker count from LESION_BENCH_THREADS, else the CPU count capped at 8."""
    return env_workers() or min(MAX_DEFAULT_WORKERS, os.cpu_count() or 1)


def resolve_workers(requested: int | None = None) -> int:
    """``requested`` capped by LESION_BENCH_THREADS; ``default_workers()`` when nothing was requested."""
    if requested is None:
        return default_workers()

    cap = env_workers()
    if cap is not None and requested > cap:
        logger.debug(f"Progress: capping {requested} workers at {THREADS_ENV_VAR}={cap}")
        return cap
    return requested


def ordered_map(fn: Callable[[T], R], items: Sequence[T], workers: int = 1) -> list[R]:
    """Apply ``fn`` to every item, concurrently if ``workers`` > 1, keeping input order."""
    if workers <= 1 or len(items) < 2:
        return [fn(item) for item in items]

    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(fn, items))
