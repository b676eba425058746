"""Time the numba kernels against the pure-numpy fallback.

    python benchmarks/bench_kernels.py [--repeat 5]

Also checks that both backends return identical arrays on every input.
"""

import argparse
import time

import numpy as np

from pseg import fen, kernels
from pseg.diffcore.ops import as_groups
from pseg.geom import PointCloud


def best_of(fn, repeat):
    fn()  # warm-up (and JIT compile)
    times = []
    for _ in range(repeat):
        t = time.perf_counter()
        fn()
        times.append(time.perf_counter() - t)
    return min(times)


def cases(rng):
    X3 = rng.normal(size=(2048, 3))
    X64 = rng.normal(size=(2048, 64))
    F = rng.normal(size=(2048, 64))
    nbrs = rng.integers(0, 2048, size=(2048, 20))
    indptr, indices = as_groups(nbrs)
    _, arg = kernels.group_max(F, indptr, indices)
    G = rng.normal(size=(2048, 64))
    rows = rng.integers(0, 2048, size=8192)
    R = rng.normal(size=(8192, 64))
    params = fen.init_params(fen.FenConfig(), 0)
    cloud = PointCloud(X3, np.zeros_like(X3))
    return [
        ("knn k=20, 2048x3", lambda: kernels.knn(X3, 20)),
        ("knn k=20, 2048x64", lambda: kernels.knn(X64, 20)),
        ("fps m=10, 2048x64", lambda: kernels.fps(X64, 10, 0)),
        ("group_max 2048x20 groups, d=64", lambda: kernels.group_max(F, indptr, indices)),
        ("scatter_cols 2048x64", lambda: kernels.scatter_cols(G, arg, 2048)),
        ("scatter_rows 8192->2048, d=64", lambda: kernels.scatter_rows(R, rows, 2048)),
        ("extract_features 2048 points", lambda: fen.extract_features(cloud, params)),
    ]


def same(a, b):
    if isinstance(a, tuple):
        return all(same(x, y) for x, y in zip(a, b))
    return np.array_equal(a, b)


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=5)
    args = ap.parse_args(argv)
    if not kernels.HAS_NUMBA:
        print("numba is not installed; only the numpy backend is available")
        return
    rng = np.random.default_rng(0)
    print(f"{'kernel':34s} {'numba s':>9s} {'numpy s':>9s} {'speed-up':>9s}  identical")
    for name, fn in cases(rng):
        out = {}
        t = {}
        for backend in ("numba", "numpy"):
            kernels.set_backend(backend)
            t[backend] = best_of(fn, args.repeat)
            out[backend] = fn()
        print(f"{name:34s} {t['numba']:9.4f} {t['numpy']:9.4f} {t['numpy'] / t['numba']:8.1f}x  "
              f"{same(out['numba'], out['numpy'])}")
    kernels.set_backend("numba")


if __name__ == "__main__":
    main()
