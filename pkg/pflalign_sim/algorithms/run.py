"""Utility to run blocking client jobs on worker threads with a timeout."""

import asyncio
from collections.abc import Callable, Sequence
from typing import TypeVar

from ..errors import AlgorithmError

T = TypeVar("T")


async def run_workers(
    jobs: Sequence[Callable[[], T]],
    *,
    threads: int = 1,
    timeout: float | None = None,  # seconds
) -> list[T]:
    """Run `jobs` with at most `threads` in flight; results come back in job order."""
    if threads < 1:
        raise AlgorithmError(f"threads must be at least 1, got {threads}")
    semaphore = asyncio.Semaphore(threads)

    async def _run_one(job: Callable[[], T]) -> T:
        async with semaphore:
            return await asyncio.to_thread(job)

    try:
        return await asyncio.wait_for(
            asyncio.gather(*(_run_one(job) for job in jobs)), timeout=timeout
        )
    except asyncio.TimeoutError as exc:
        raise AlgorithmError(
            f"client workers timed out after {timeout} seconds"
        ) from exc
