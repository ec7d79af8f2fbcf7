"""Order-preserving thread pool shared by the solvers and the CLI."""

from __future__ import annotations

import os
from concurrent.futures import ThreadPoolExecutor

_threads = None


def set_threads(n: int | None) -> None:
    """Cap worker threads; ``None`` falls back to ``OSSI_KIT_THREADS`` or 1."""
    global _threads
    _threads = None if n is None else max(1, int(n))


def get_threads() -> int:
    if _threads is not None:
        return _threads
    env = os.environ.get("OSSI_KIT_THREADS")
    try:
        return max(1, int(env)) if env else 1
    except ValueError:
        return 1


def ordered_map(fn, items):
    """``list(map(fn, items))`` spread over the configured threads.

    Results come back in input order, and each item is processed by the
    same code whatever the worker count, so outputs do not depend on it.
    """
    items = list(items)
    n = get_threads()
    if n <= 1 or len(items) <= 1:
        return [fn(it) for it in items]
    with ThreadPoolExecutor(max_workers=min(n, len(items))) as pool:
        return list(pool.map(fn, items))
