# Tasks service
import logging
from concurrent.futures import ThreadPoolExecutor
from typing import Callable, Dict, Optional, TypeVar

from src.config import get_thread_count

# Configure logger
logger = logging.getLogger(__name__)

T = TypeVar("T")


class SolvePool:
    """
    Runs one job per vehicle and waits for all of them (the per-timestep
    barrier). With a single worker the jobs run inline, in vehicle order.
    """

    def __init__(self, workers: Optional[int] = None):
        self.workers = workers or get_thread_count()
        self._executor = ThreadPoolExecutor(max_workers=self.workers) if self.workers > 1 else None
        logger.debug(f"solve pool with {self.workers} worker(s)")

    def run(self, jobs: Dict[int, Callable[[], T]]) -> Dict[int, T]:
        if self._executor is None:
            return {key: jobs[key]() for key in sorted(jobs)}
        futures = {key: self._executor.submit(jobs[key]) for key in sorted(jobs)}
        results, first_error = {}, None
        for key in sorted(futures):
            try:
                results[key] = futures[key].result()
            except Exception as e:
                # lowest failing vehicle wins
                if first_error is None:
                    first_error = e
        if first_error is not None:
            raise first_error
        return results

    def close(self) -> None:
        if self._executor is not None:
            self._executor.shutdown(wait=True)
            self._executor = None

    def __enter__(self) -> "SolvePool":
        return self

    def __exit__(self, *exc) -> None:
        self.close()
