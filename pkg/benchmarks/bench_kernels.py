"""Compare the compiled aggregation kernels against the numpy fallback.

    python benchmarks/bench_kernels.py [--nodes 4000] [--dim 20] [--repeat 20]
"""
from __future__ import annotations

import argparse
import timeit

import numpy as np

from amp import kernels


def random_edges(rng, n, avg_degree):
    m = n * avg_degree
    src = rng.integers(0, n, size=m)
    dst = rng.integers(0, n, size=m)
    return src.astype(np.int64), dst.astype(np.int64)


def main(argv=None):
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--nodes", type=int, default=4000)
    parser.add_argument("--dim", type=int, default=20)
    parser.add_argument("--degree", type=int, default=6)
    parser.add_argument("--repeat", type=int, default=20)
    args = parser.parse_args(argv)

    if kernels.COMPILED_KERNELS is None:
        print("compiled extension not built; only the numpy path is available")
    rng = np.random.default_rng(0)
    n, d = args.nodes, args.dim
    src, dst = random_edges(rng, n, args.degree)
    h = rng.normal(size=(n, d))
    w = rng.random(len(src))
    msgs = h[src]

    cases = {
        "scatter_add": lambda k: k["scatter_add"](msgs, dst, n),
        "gather_rows": lambda k: k["gather_rows"](h, src),
        "propagate": lambda k: k["propagate"](h, src, dst, w, n),
        "propagate_unweighted": lambda k: k["propagate_unweighted"](h, src, dst, n),
    }
    backends = {"numpy": kernels.NUMPY_KERNELS}
    if kernels.COMPILED_KERNELS is not None:
        backends["cython"] = kernels.COMPILED_KERNELS

    print(f"n={n} d={d} edges={len(src)} repeat={args.repeat}")
    print(f"{'kernel':<22}" + "".join(f"{b:>12}" for b in backends) + f"{'speedup':>10}")
    for name, call in cases.items():
        times = {}
        results = {}
        for b, table in backends.items():
            results[b] = call(table)
            times[b] = min(timeit.repeat(lambda: call(table), number=1, repeat=args.repeat))
        row = f"{name:<22}" + "".join(f"{times[b] * 1e3:>10.3f}ms" for b in backends)
        if "cython" in times:
            row += f"{times['numpy'] / times['cython']:>9.1f}x"
            assert np.allclose(results["numpy"], results["cython"], rtol=0, atol=1e-12)
        print(row)


if __name__ == "__main__":
    main()
