"""Process-level runtime knobs."""

from __future__ import annotations

import os


def max_workers() -> int:
    """Worker-process cap for embarrassingly parallel loops.

    Defaults to 1 (sequential, lowest-variance timing); LATENTWEAR_THREADS
    raises the cap, never above the machine's CPU count.
    """
    raw = os.environ.get("LATENTWEAR_THREADS", "1")
    try:
        cap = int(raw)
    except ValueError:
        raise ValueError(f"LATENTWEAR_THREADS={raw!r} is not an integer") from None
    if cap < 1:
        raise ValueError(f"LATENTWEAR_THREADS must be >= 1, got {cap}")
    return min(cap, os.cpu_count() or 1)


def parallel_map(fn, items):
    """Order-preserving map, process-parallel when the cap allows it."""
    workers = max_workers()
    if workers <= 1 or len(items) <= 1:
        return [fn(item) for item in items]
    from concurrent.futures import ProcessPoolExecutor

    with ProcessPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(fn, items))
