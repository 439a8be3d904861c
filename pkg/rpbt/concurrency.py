"""
Fan-out of independent per-agent jobs over a process pool.

Results come back in submission order, so the outcome of a round never depends on which
worker finished first. All randomness must travel inside the job arguments.
"""

import logging
import os
import sys
from concurrent.futures import FIRST_EXCEPTION, Executor, Future, ProcessPoolExecutor, ThreadPoolExecutor, wait
from typing import Callable, List, Optional, Sequence, Tuple, TypeVar

import numpy as np
from mypy_extensions import mypyc_attr

logger = logging.getLogger(__name__)

T = TypeVar("T")


def make_executor(workers: int) -> Executor:
    if sys.platform == "win32":
        # Work around https://bugs.python.org/issue26903
        workers = min(workers, 60)
    try:
        return ProcessPoolExecutor(max_workers=workers)
    except (ImportError, NotImplementedError, OSError):
        # no multiprocessing on this platform (AWS Lambda, Termux): one thread, since more would
        # only contend for the GIL
        logger.info("process pool unavailable, running jobs on a single thread")
        return ThreadPoolExecutor(max_workers=1)


@mypyc_attr(patchable=True)
def run_jobs(fn: Callable[..., T], jobs: Sequence[Tuple], workers: Optional[int] = 1) -> List[T]:
    """Call `fn(*job)` for every job and return the results in job order.

    `workers=None` uses every CPU; `workers=1` runs inline. The first exception cancels the jobs
    that have not started and is re-raised.
    """
    if workers is None:
        workers = os.cpu_count() or 1
    if workers <= 1 or len(jobs) <= 1:
        return [fn(*job) for job in jobs]

    executor = make_executor(min(workers, len(jobs)))
    try:
        futures: List[Future] = [executor.submit(fn, *job) for job in jobs]
        done, pending = wait(futures, return_when=FIRST_EXCEPTION)
        for future in futures:
            if future in done and future.exception() is not None:
                for other in pending:
                    other.cancel()
                raise future.exception()  # type: ignore[misc]
        return [future.result() for future in futures]
    finally:
        executor.shutdown(wait=True)


def derive_seed(seed: int, round_index: int, agent_id: int, purpose: int) -> int:
    """A 63-bit seed that depends only on (run seed, round, agent, purpose)."""
    sequence = np.random.SeedSequence([seed, round_index, agent_id, purpose])
    return int(sequence.generate_state(2, dtype=np.uint64)[0] >> np.uint64(1))


def derive_rng(seed: int, round_index: int, agent_id: int, purpose: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([seed, round_index, agent_id, purpose]))
