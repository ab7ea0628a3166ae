import collections.abc
import os
import random
from concurrent.futures import ThreadPoolExecutor
from itertools import repeat
from typing import Callable, Iterable, List, Optional, TypeVar

import numpy as np
import torch
from loguru import logger

from evsign.constants import THREADS_ENV

T = TypeVar("T")
R = TypeVar("R")


def _ntuple(n):
    def parse(x):
        if isinstance(x, collections.abc.Iterable) and not isinstance(x, str):
            x = tuple(x)
            if len(x) == 1:
                x = tuple(repeat(x[0], n))
            return x
        return tuple(repeat(x, n))
    return parse

to_1tuple = _ntuple(1)
to_2tuple = _ntuple(2)


def num_threads() -> int:
    """Worker cap from ``EVSIGN_THREADS`` (falls back to the CPU count)."""
    raw = os.environ.get(THREADS_ENV)
    if raw is None or raw.strip() == "":
        return max(1, os.cpu_count() or 1)
    try:
        value = int(raw)
    except ValueError:
        raise ValueError(f"{THREADS_ENV} must be a positive integer, got {raw!r}")
    if value < 1:
        raise ValueError(f"{THREADS_ENV} must be a positive integer, got {raw!r}")
    return value


def apply_thread_cap() -> int:
    n = num_threads()
    torch.set_num_threads(n)
    logger.debug(f"torch intra-op threads set to {n}")
    return n


def set_reproducible(seed: int):
    random.seed(seed)
    np.random.seed(seed % (2 ** 32))
    torch.manual_seed(seed)
    torch.use_deterministic_algorithms(True, warn_only=True)


def ordered_map(fn: Callable[[T], R], items: Iterable[T], workers: Optional[int] = None) -> List[R]:
    """Apply ``fn`` on a thread pool; results keep the order of ``items``."""
    items = list(items)
    workers = workers or num_threads()
    if workers == 1 or len(items) <= 1:
        return [fn(item) for item in items]
    with ThreadPoolExecutor(max_workers=min(workers, len(items))) as pool:
        return list(pool.map(fn, items))
