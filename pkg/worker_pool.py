import asyncio
import os
import threading
from typing import Awaitable, Callable, List, Sequence, TypeVar

from logging_config import logger

T = TypeVar('T')

# Concurrency configuration
MAX_WORKERS = os.cpu_count() or 1  # Chains or replicates allowed to run at once

# Thread safety for the limit
worker_limit_lock = threading.Lock()


def get_worker_limit():
    with worker_limit_lock:
        return MAX_WORKERS


def update_worker_limit(new_max_workers):
    """
    Update the cap on concurrently running jobs.
    Called by config_validator once the BLOC_INFER_THREADS setting is checked.
    """
    global MAX_WORKERS
    with worker_limit_lock:
        MAX_WORKERS = max(int(new_max_workers), 1)
        logger.info(f"Worker limit updated: {MAX_WORKERS} concurrent jobs")


async def run_in_workers(jobs: Sequence[Callable[[], T]], limit=None) -> List[T]:
    """
    Run blocking jobs in worker threads, at most ``limit`` at a time.

    Args:
        jobs: zero-argument callables, e.g. one per chain
        limit (int): overrides the configured worker cap

    Returns:
        list: results in the order of ``jobs``, independent of completion order
    """
    semaphore = asyncio.Semaphore(limit or get_worker_limit())

    async def run_one(index, job) -> T:
        async with semaphore:
            logger.debug(f"Starting job {index}")
            result = await asyncio.to_thread(job)
            logger.debug(f"Finished job {index}")
            return result

    tasks: List[Awaitable[T]] = [run_one(index, job) for index, job in enumerate(jobs)]
    return list(await asyncio.gather(*tasks))


def run_jobs(jobs: Sequence[Callable[[], T]], limit=None) -> List[T]:
    """Synchronous entry point for callers outside an event loop."""
    return asyncio.run(run_in_workers(jobs, limit=limit))
