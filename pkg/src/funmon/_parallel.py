"""Deterministic fan-out helper honoring the FUNMON_THREADS env variable."""

import os
from concurrent.futures import ThreadPoolExecutor


def thread_count() -> int:
    """Worker count from FUNMON_THREADS, defaulting to the CPU count."""
    raw = os.environ.get("FUNMON_THREADS", "")
    try:
        n = int(raw)
    except ValueError:
        n = 0
    if n < 1:
        n = os.cpu_count() or 1
    return n


def parallel_map(fn, items):
    """Map ``fn`` over ``items`` preserving order.

    Work items must be independent; the ordered reduction makes results
    identical for any worker count.
    """
    items = list(items)
    workers = thread_count()
    if workers == 1 or len(items) <= 1:
        return [fn(item) for item in items]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(fn, items))
