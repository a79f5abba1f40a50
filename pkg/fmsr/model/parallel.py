# Run func(args) concurrently and aggregate the results in submission order

import logging
import time
from functools import partial
from typing import Callable, List, Optional, Sequence, TypeVar

from multiprocess import Pool, cpu_count
from tqdm.auto import tqdm

T = TypeVar("T")
U = TypeVar("U")
SupportedFuncType = Callable[[U], T]
AggFuncType = Callable[[Optional[T], Optional[T]], T]

logger = logging.getLogger(__name__)


def _get_default_n_workers(total: int = 512) -> int:
    return max(1, min(total, int(cpu_count() / 3 * 2)))


def agg_append_list(r: Optional[List], s: Optional[T]) -> List:
    if r is None:
        return []
    r.append(s)
    return r


def parallel(
    func: SupportedFuncType,
    args: Sequence[U],
    agg_func: Optional[AggFuncType] = agg_append_list,
    n_workers: Optional[int] = None,
    total: Optional[int] = None,
    progress_bar=tqdm,
    desc: Optional[str] = None,
):
    """
    Wraps multiprocess.Pool; results are consumed in the order of args so that any
    aggregation is deterministic, whatever the scheduling.
    :param func: function to parallel (accepts only 1 parameter, must be picklable by dill)
    :param args: sequence containing function arguments
    :param agg_func: function to aggregate the results (default: collect into a list)
    :param n_workers: # of worker processes; 1 runs in-process (default: 2/3 core count)
    :param total: # of iterations (default: len(args))
    :param progress_bar: tqdm instance, None for no bar (default: tqdm.auto)
    """
    if not total:
        total = len(args)
    if not n_workers:
        n_workers = _get_default_n_workers(total)

    r = agg_func(None, None) if agg_func is not None else None
    start = time.time()
    name = desc or getattr(func, "__name__", "func")
    if progress_bar is None:
        progress_bar = partial(tqdm, disable=True)
    if n_workers == 1 or total <= 1:
        with progress_bar(total=total, desc=name) as t:
            for a in args:
                i = func(a)
                if agg_func is not None:
                    r = agg_func(r, i)
                t.update()
        return r

    logger.info("starting %d jobs on %d workers", total, n_workers)
    pool = Pool(n_workers)
    try:
        with progress_bar(total=total, desc=name) as t:
            for i in pool.imap(func, args):
                if agg_func is not None:
                    r = agg_func(r, i)
                t.set_postfix({"time": "%.1fs" % (time.time() - start)})
                t.update()
        return r
    except Exception as e:
        logger.error("error in parallel %s: %s", name, e)
        raise
    finally:
        pool.close()  # close the pool to any new jobs
        pool.join()  # cleanup the closed worker processes
