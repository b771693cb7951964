"""Small helpers for optional thread-level parallelism.

The numerical kernels are numpy-bound, so threads mostly help when
several independent experiments are simulated or interpolated.  The
BILEVEL_NUM_THREADS environment variable caps the worker count; unset
it defaults to the machine's CPU count.
"""

from __future__ import annotations

import os
from concurrent.futures import ThreadPoolExecutor
from typing import Callable, Iterable, Sequence, TypeVar

T = TypeVar("T")
R = TypeVar("R")

__all__ = ["worker_count", "thread_map"]


def worker_count(n_items: int | None = None) -> int:
    raw = os.environ.get("BILEVEL_NUM_THREADS")
    if raw is not None:
        try:
            n = int(raw)
        except ValueError as exc:
            raise ValueError(f"BILEVEL_NUM_THREADS must be an integer, got {raw!r}") from exc
        n = max(1, n)
    else:
        n = os.cpu_count() or 1
    if n_items is not None:
        n = max(1, min(n, n_items))
    return n


def thread_map(fn: Callable[[T], R], items: Sequence[T] | Iterable[T]) -> list[R]:
    """map() over items, threaded when more than one worker is allowed."""
    items = list(items)
    workers = worker_count(len(items))
    if workers <= 1 or len(items) <= 1:
        return [fn(it) for it in items]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(fn, items))
