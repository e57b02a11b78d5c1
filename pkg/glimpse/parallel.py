"""Order-preserving thread-pool map for independent work items."""

import logging
import os
from concurrent.futures import ThreadPoolExecutor
from typing import Callable, Iterable, List, Optional, TypeVar

from .exceptions import ConfigError

logger = logging.getLogger(__name__)

THREADS_ENV = "GLIMPSE_THREADS"

T = TypeVar("T")
R = TypeVar("R")


def worker_count(requested: Optional[int] = None) -> int:
    """Workers to use: `requested` (default cpu_count) capped by GLIMPSE_THREADS."""
    n = requested or os.cpu_count() or 1
    cap = os.environ.get(THREADS_ENV)
    if cap:
        try:
            cap_value = int(cap)
        except ValueError:
            raise ConfigError(f"{THREADS_ENV} must be a positive integer, got {cap!r}", key=THREADS_ENV) from None
        if cap_value < 1:
            raise ConfigError(f"{THREADS_ENV} must be a positive integer, got {cap!r}", key=THREADS_ENV)
        n = min(n, cap_value)
    return max(1, n)


def ordered_map(fn: Callable[[T], R], items: Iterable[T], workers: Optional[int] = None) -> List[R]:
    """Apply `fn` to every item concurrently; results come back in input order."""
    items = list(items)
    n = min(worker_count(workers), len(items))
    if n <= 1:
        return [fn(item) for item in items]
    logger.debug("mapping %d items over %d threads", len(items), n)
    with ThreadPoolExecutor(max_workers=n, thread_name_prefix="glimpse") as pool:
        return list(pool.map(fn, items))
