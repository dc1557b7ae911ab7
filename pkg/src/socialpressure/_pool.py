from concurrent.futures import ProcessPoolExecutor


def pmap(fn, items, workers: int = 1):
    """Order-preserving map, optionally over a process pool.

    Results always come back in input order, so any reduction over them is
    independent of scheduling.
    """
    items = list(items)
    if workers is None or workers <= 1 or len(items) <= 1:
        return [fn(x) for x in items]
    with ProcessPoolExecutor(max_workers=workers) as ex:
        return list(ex.map(fn, items))
