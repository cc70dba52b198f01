"""Small shared helpers: seed derivation and bounded parallel mapping."""

from __future__ import annotations

import hashlib
import os
from concurrent.futures import ThreadPoolExecutor
from typing import Callable, Iterable, Sequence, TypeVar

T = TypeVar("T")
R = TypeVar("R")


def derive_seed(base: int, *labels: object) -> int:
    """Derive a child seed from a base seed and a label path.

    Stable across platforms and library versions (sha256-based), so runs
    are reproducible from the single seed recorded in the config.
    """
    text = ":".join([str(int(base))] + [str(part) for part in labels])
    digest = hashlib.sha256(text.encode("utf-8")).digest()
    return int.from_bytes(digest[:8], "little") >> 1


def default_threads() -> int:
    return os.cpu_count() or 1


def parallel_map(fn: Callable[[T], R], items: Sequence[T], threads: int = 1) -> list[R]:
    """Map preserving input order; thread pool when threads > 1.

    Tasks must be independent and deterministic given their arguments, so
    the result is identical for every thread count.
    """
    if threads <= 1 or len(items) <= 1:
        return [fn(item) for item in items]
    with ThreadPoolExecutor(max_workers=threads) as pool:
        return list(pool.map(fn, items))
