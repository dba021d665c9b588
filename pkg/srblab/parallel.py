"""
Order-preserving worker pool used by the sample and node loops.

Results come back in input order whatever the schedule, so outputs are
identical for any thread count.
"""

import logging
import os
from concurrent.futures import ThreadPoolExecutor
from typing import Callable, Iterable, List, Optional, TypeVar, Union

import numpy as np

from .conf import lab_setting

logger = logging.getLogger(__name__)

T = TypeVar('T')
R = TypeVar('R')


def resolve_threads(threads: Optional[Union[int, str]] = None) -> int:
    """Turn ``None``, ``'auto'`` or a number into a positive worker count."""
    if threads is None:
        threads = lab_setting('THREADS')
    if threads == 'auto':
        return max(1, os.cpu_count() or 1)
    count = int(threads)
    if count < 1:
        raise ValueError(f"Thread count must be positive, got {count}")
    return count


def parallel_map(func: Callable[[T], R], items: Iterable[T], threads: Optional[Union[int, str]] = None) -> List[R]:
    """
    Apply ``func`` to every item, possibly on several threads.

    Args:
        func: Pure function of one item
        items: Items to process
        threads: Worker count, ``'auto'`` or ``None`` for the configured default

    Returns:
        List of results in the order of ``items``
    """
    items = list(items)
    workers = min(resolve_threads(threads), max(1, len(items)))
    if workers == 1:
        return [func(item) for item in items]
    logger.debug(f"Mapping {len(items)} items over {workers} threads")
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(func, items))


def item_rng(seed: int, index: int) -> np.random.Generator:
    """Independent generator for item ``index`` of a run seeded with ``seed``."""
    return np.random.default_rng(np.random.SeedSequence([int(seed), int(index)]))
