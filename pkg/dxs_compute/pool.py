"""
Local worker pool for per-subject and per-fold parallelism.

Results always come back in submission order, so outputs never depend on
scheduling. With one worker (DXS_THREADS=1, determinism mode) work runs
inline in the calling thread.
"""

import contextvars
import logging
from concurrent.futures import ThreadPoolExecutor
from typing import Callable, Iterable, List, Optional, TypeVar

from dxs_graph.config import get_worker_count

logger = logging.getLogger(__name__)

T = TypeVar("T")
R = TypeVar("R")


class WorkerPool:
    """Ordered map over a thread pool capped by DXS_THREADS."""

    def __init__(self, max_workers: Optional[int] = None):
        """
        Args:
            max_workers: Worker cap; defaults to DXS_THREADS read at call time
        """
        self.max_workers = max(1, max_workers) if max_workers else get_worker_count()

    @property
    def inline(self) -> bool:
        return self.max_workers == 1

    def map(self, fn: Callable[[T], R], items: Iterable[T]) -> List[R]:
        """
        Apply `fn` to every item and return results in input order.

        The caller's context variables (run id for live logging) are visible
        inside the workers. The first exception raised by any item is
        re-raised after all submitted work has finished.
        """
        items = list(items)
        if self.inline or len(items) <= 1:
            return [fn(item) for item in items]

        workers = min(self.max_workers, len(items))
        logger.debug(f"WorkerPool: {len(items)} items on {workers} workers")
        with ThreadPoolExecutor(max_workers=workers) as executor:
            futures = [
                executor.submit(contextvars.copy_context().run, fn, item)
                for item in items
            ]
            return [future.result() for future in futures]
