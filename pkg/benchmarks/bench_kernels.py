"""Time the numba and numpy convolution backends on the shapes training uses.

    python benchmarks/bench_kernels.py [--repeats 30]

Prints one row per shape with forward and backward milliseconds for each
backend and the largest absolute disagreement between them.
"""
import argparse
import time

import numpy as np

from egoaco import kernels

# (input shape, output channels): trunk blocks, branch convs, LSTA gates, tracker
SHAPES = [
    ((64, 3, 32, 32), 8),
    ((64, 8, 16, 16), 16),
    ((64, 16, 8, 8), 32),
    ((64, 32, 4, 4), 32),
    ((8, 64, 4, 4), 96),
    ((8, 64, 4, 4), 32),
    ((8, 2, 4, 4), 4),
]


def _time(fn, repeats):
    fn()  # warm-up (and numba compilation)
    t0 = time.perf_counter()
    for _ in range(repeats):
        fn()
    return (time.perf_counter() - t0) / repeats * 1e3


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeats", type=int, default=30)
    args = ap.parse_args(argv)
    rng = np.random.default_rng(0)
    backends = ["numpy"] + (["numba"] if kernels.HAVE_NUMBA else [])
    print(f"{'input':>18} {'out':>4} " + " ".join(f"{b + ' fwd':>10} {b + ' bwd':>10}" for b in backends) + "   max diff")
    for shape, cout in SHAPES:
        x = rng.standard_normal(shape)
        w = rng.standard_normal((cout, shape[1], 3, 3))
        b = rng.standard_normal(cout)
        g = rng.standard_normal((shape[0], cout) + shape[2:])
        cells, results = [], []
        for name in backends:
            fwd, bwd = kernels.get_kernels(name)
            cells.append(_time(lambda: fwd(x, w, b), args.repeats))
            cells.append(_time(lambda: bwd(x, w, g, True, True), args.repeats))
            results.append((fwd(x, w, b),) + bwd(x, w, g, True, True))
        diff = 0.0
        if len(results) == 2:
            diff = max(float(np.abs(p - q).max()) for p, q in zip(*results))
        print(f"{str(shape):>18} {cout:>4} " + " ".join(f"{c:>10.2f}" for c in cells) + f"   {diff:.1e}")


if __name__ == "__main__":
    main()
