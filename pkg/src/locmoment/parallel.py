"""Order-preserving parallel map.

Work items are independent; results are always returned in item order so
reductions downstream see the same sequence whatever the worker count.
"""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor

_default_workers = 1


def set_default_workers(k: int) -> None:
    global _default_workers
    _default_workers = max(1, int(k))


def ordered_map(func, items, workers: int | None = None) -> list:
    items = list(items)
    k = _default_workers if workers is None else max(1, int(workers))
    if k == 1 or len(items) < 2:
        return [func(it) for it in items]
    with ThreadPoolExecutor(max_workers=k) as pool:
        return list(pool.map(func, items))
