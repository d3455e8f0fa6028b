"""Chunked process-pool mapping over grids of base points."""

from __future__ import annotations

import logging
from concurrent.futures import ProcessPoolExecutor

import numpy as np

log = logging.getLogger(__name__)

_ERRORS = (ArithmeticError, AssertionError, ValueError)


def map_chunks(func, grid, jobs: int = 1, args=(), fallback=None, chunks_per_job: int = 4) -> list:
    """Apply ``func(chunk, *args)`` to contiguous chunks of ``grid`` and concatenate.

    ``func`` must return a list of rows in chunk order, so the output does not
    depend on ``jobs``. A chunk whose batch call raises is retried with
    ``fallback(chunk)`` in the parent process, if given.
    """
    grid = np.asarray(grid)
    jobs = max(1, int(jobs))
    if jobs == 1 or grid.shape[0] < 2:
        pieces = [grid]
    else:
        count = min(grid.shape[0], jobs * chunks_per_job)
        pieces = np.array_split(grid, count)

    def recover(chunk, exc):
        if fallback is None:
            raise exc
        log.info("batch failed (%s); retrying point by point", exc)
        return fallback(chunk)

    rows = []
    if len(pieces) == 1:
        try:
            rows.extend(func(grid, *args))
        except _ERRORS as exc:
            rows.extend(recover(grid, exc))
        return rows
    with ProcessPoolExecutor(max_workers=jobs) as pool:
        futures = [pool.submit(func, chunk, *args) for chunk in pieces]
        for chunk, fut in zip(pieces, futures):
            try:
                rows.extend(fut.result())
            except _ERRORS as exc:
                rows.extend(recover(chunk, exc))
    return rows
