"""Compare the compiled kernels with the numpy fallback.

    python3 benchmarks/bench_kernels.py [--repeat N]

Prints the median wall time per call for each backend and checks that both
backends return identical results on the same inputs.
"""
import argparse
import statistics
import time

import numpy as np

from trajoracle import kernels


def _time(fn, repeat):
    times = []
    for _ in range(repeat):
        t0 = time.perf_counter()
        fn()
        times.append(time.perf_counter() - t0)
    return statistics.median(times)


def _unit(rng, n, d):
    x = rng.normal(size=(n, d))
    return np.ascontiguousarray(x / np.linalg.norm(x, axis=1, keepdims=True))


def workloads(rng):
    """(name, callable(module) -> result) pairs sized like one evaluation fold and larger."""
    archive_small, q_small = _unit(rng, 214, 128), _unit(rng, 54, 128)
    archive_big, q_big = _unit(rng, 20000, 128), _unit(rng, 64, 128)
    scores = rng.random(5000)
    scores[::7] = scores[1::7][: scores[::7].size]  # some ties
    labels = rng.integers(0, 2, size=5000).astype(np.int_)
    n_param = 200_000
    grad = rng.normal(size=n_param)

    def adamw(mod):
        p, m, v = np.ones(n_param), np.zeros(n_param), np.zeros(n_param)
        for _ in range(5):
            mod.adamw_update(p, grad, m, v, 1 - 1e-6, 0.9, 0.999, 0.5, 1e-8, 1e-4)
        return p

    return [
        ("top-5, 54 queries x 214 rows", lambda mod: mod.topk_inner_product_batch(
            archive_small, q_small, 5)),
        ("top-5, 64 queries x 20000 rows", lambda mod: mod.topk_inner_product_batch(
            archive_big, q_big, 5)),
        ("AUC, 5000 scores", lambda mod: mod.mann_whitney_auc(scores, labels)),
        ("AdamW x5, 200k params", adamw),
    ]


def _same(a, b):
    if isinstance(a, tuple):
        return all(_same(x, y) for x, y in zip(a, b))
    if isinstance(a, list):
        return len(a) == len(b) and all(_same(x, y) for x, y in zip(a, b))
    return np.array_equal(np.asarray(a), np.asarray(b))


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=7)
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args(argv)
    backends = kernels.backends()
    if "cython" not in backends:
        print("compiled kernels unavailable; timing the numpy fallback only")
    print(f"{'workload':34s}" + "".join(f"{n:>12s}" for n in backends) + "     speedup  identical")
    for name, fn in workloads(np.random.default_rng(args.seed)):
        results = {b: fn(mod) for b, mod in backends.items()}
        times = {b: _time(lambda mod=mod: fn(mod), args.repeat) for b, mod in backends.items()}
        row = f"{name:34s}" + "".join(f"{times[b] * 1e3:10.3f}ms" for b in backends)
        if "cython" in backends:
            row += f"{times['python'] / times['cython']:11.2f}x"
            row += f"  {_same(results['python'], results['cython'])!s:>9}"
        print(row)


if __name__ == "__main__":
    main()
