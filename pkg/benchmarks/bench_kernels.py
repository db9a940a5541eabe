"""Time the compiled and pure-Python kernels on the same inputs.

    python benchmarks/bench_kernels.py [--repeat 5] [--batch 32]

Prints one row per kernel and backend with the best time over ``--repeat``
runs, plus the speedup of the compiled backend where it is available.
"""
import argparse
import timeit

import numpy as np

from asi import kernels


def workloads(batch, seed=0):
    rng = np.random.default_rng(seed)
    x = rng.standard_normal((batch, 16, 32, 32))
    cols = kernels.im2col(x, 3, 3, 1, 1)
    q = rng.standard_normal((4096, 16))
    return {
        "im2col 3x3": lambda impl: kernels.im2col(x, 3, 3, 1, 1, impl=impl),
        "col2im 3x3": lambda impl: kernels.col2im(cols, x.shape, 3, 3, 1, 1, impl=impl),
        "mgs 4096x16": lambda impl: kernels.mgs(q.copy(), 0, 1e-10, impl=impl),
    }


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=5)
    ap.add_argument("--batch", type=int, default=32)
    args = ap.parse_args(argv)

    impls = kernels.backends()
    print(f"default backend: {kernels.BACKEND}")
    print(f"{'kernel':<14}{'backend':<10}{'best ms':>10}{'speedup':>10}")
    for name, fn in workloads(args.batch).items():
        best = {}
        for backend, impl in sorted(impls.items()):
            fn(impl)  # warm-up
            best[backend] = min(timeit.repeat(lambda: fn(impl), number=1, repeat=args.repeat))
        for backend, t in best.items():
            ratio = best["python"] / t if backend != "python" else 1.0
            print(f"{name:<14}{backend:<10}{t * 1e3:>10.2f}{ratio:>9.2f}x")


if __name__ == "__main__":
    main()
