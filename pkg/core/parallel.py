from __future__ import annotations

import os
from concurrent.futures import ThreadPoolExecutor
from typing import Callable, Iterable, List, Optional, TypeVar

T = TypeVar("T")
R = TypeVar("R")

ProgressHook = Callable[[int], None]


def resolve_jobs(jobs: Optional[int]) -> int:
    if jobs is None:
        return os.cpu_count() or 1
    if jobs < 1:
        raise ValueError(f"jobs must be at least 1, got {jobs}")
    return jobs


def map_ordered(
    fn: Callable[[T], R],
    items: Iterable[T],
    jobs: Optional[int] = None,
    on_done: Optional[ProgressHook] = None,
) -> List[R]:
    """Apply fn to every item on a thread pool; results keep input order."""
    work = list(items)
    width = min(resolve_jobs(jobs), max(len(work), 1))
    results: List[R] = []
    if width == 1:
        for item in work:
            results.append(fn(item))
            if on_done is not None:
                on_done(1)
        return results
    with ThreadPoolExecutor(max_workers=width) as pool:
        for result in pool.map(fn, work):
            results.append(result)
            if on_done is not None:
                on_done(1)
    return results
