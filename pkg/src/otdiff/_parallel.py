"""Thread-count control for row-blocked kernel evaluations.

Each output row is reduced by exactly one worker in a fixed column order,
so results do not depend on the number of threads used for the row split.
BLAS threads are pinned separately through threadpoolctl.
"""

from __future__ import annotations

import os
from concurrent.futures import ThreadPoolExecutor
from contextlib import contextmanager

from threadpoolctl import threadpool_limits

_THREADS: int | None = None


def get_threads() -> int:
    if _THREADS is not None:
        return _THREADS
    try:
        return max(1, int(os.environ.get("OTDIFF_THREADS", "1")))
    except ValueError:
        return 1


def set_threads(n: int | None) -> None:
    global _THREADS
    _THREADS = None if n is None else max(1, int(n))


@contextmanager
def thread_scope(n: int | None = None):
    """Fix the worker count (and BLAS threads) for the enclosed block."""
    global _THREADS
    previous = _THREADS
    if n is not None:
        _THREADS = max(1, int(n))
    try:
        with threadpool_limits(limits=get_threads()):
            yield get_threads()
    finally:
        _THREADS = previous


def run_blocks(func, blocks):
    """Call ``func(start, stop)`` for every block, possibly in parallel."""
    blocks = list(blocks)
    n = get_threads()
    if n == 1 or len(blocks) == 1:
        for start, stop in blocks:
            func(start, stop)
        return
    with ThreadPoolExecutor(max_workers=n) as pool:
        for _ in pool.map(lambda b: func(*b), blocks):
            pass
