"""
Frame-level worker pool with results in task order
"""

from concurrent.futures import ProcessPoolExecutor
from functools import partial
from typing import Callable, Iterable, List, Optional, Sequence, TypeVar

import numpy as np
from tqdm import tqdm

T = TypeVar("T")
R = TypeVar("R")


def ordered_map(
    fn: Callable[[T], R], tasks: Sequence[T], workers: int = 1, desc: Optional[str] = None, progress: bool = True
) -> List[R]:
    """
    Apply `fn` to every task, returning results in task order

    With more than one worker the tasks run in a process pool; `fn` and the
    tasks must be picklable. Worker count never changes the results.
    """
    tasks = list(tasks)
    bar = partial(tqdm, total=len(tasks), desc=desc, disable=not progress or len(tasks) < 2, leave=False)
    if workers <= 1 or len(tasks) < 2:
        return [result for result in bar(map(fn, tasks))]
    with ProcessPoolExecutor(max_workers=min(workers, len(tasks))) as pool:
        return [result for result in bar(pool.map(fn, tasks, chunksize=1))]


def mapper(workers: int = 1, desc: Optional[str] = None, progress: bool = True) -> Callable[[Callable, Iterable], List]:
    """`map`-compatible callable backed by `ordered_map`"""

    def _map(fn: Callable, tasks: Iterable) -> List:
        return ordered_map(fn, list(tasks), workers, desc, progress)

    return _map


def spawn_seeds(seed: int, count: int) -> List[np.random.SeedSequence]:
    """Independent per-task seeds that depend only on (seed, task index)"""
    return np.random.SeedSequence(seed).spawn(count)
