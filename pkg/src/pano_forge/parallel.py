"""Order-preserving process pool for per-candidate work.

Results always come back in task order, so outputs do not depend on the
worker count. Shared read-only state (frames, estimator, config) is handed
to workers once through the pool initializer rather than with every task.
"""

from __future__ import annotations

import multiprocessing
from concurrent.futures import ProcessPoolExecutor

_STATE: dict = {}


def _init(state):
    _STATE.clear()
    _STATE.update(state)


def _call(task):
    return _STATE["fn"](_STATE, task)


def parallel_map(fn, tasks, state: dict, workers: int = 1):
    """``[fn(state, t) for t in tasks]``, optionally spread over processes.

    ``fn`` must be a module-level function so it can be resolved in workers.
    """
    tasks = list(tasks)
    state = dict(state, fn=fn)
    if workers <= 1 or len(tasks) <= 1:
        return [fn(state, t) for t in tasks]
    chunksize = max(1, len(tasks) // (workers * 8))
    ctx = multiprocessing.get_context("fork")
    with ProcessPoolExecutor(max_workers=workers, mp_context=ctx, initializer=_init,
                             initargs=(state,)) as pool:
        return list(pool.map(_call, tasks, chunksize=chunksize))
