#!/usr/bin/env python3
"""Benchmark the gamma-family kernels: compiled extension vs pure Python.

Times ``lgamma``, ``digamma``, and ``trigamma`` over flat f64 buffers of
several sizes for both backends, checks that the two implementations agree,
and prints a speedup table.  The library itself picks the compiled backend
automatically when it is built; ``TVAE_PURE_KERNELS=1`` forces the fallback
(this script reports which backend the library selected, then benchmarks
both backends explicitly through their low-level entry points).

Usage:
    python benchmarks/bench_special.py [--sizes 1000,100000,1000000] [--repeats 5]
"""

import argparse
import time

import numpy as np

from tvae._kernels import BACKEND, special_py

try:
    from tvae._kernels import _special
except ImportError:  # source checkout without a compiler
    _special = None

FUNCTIONS = ("lgamma", "digamma", "trigamma")


def best_time(into, x, out, repeats):
    timings = []
    for _ in range(repeats):
        start = time.perf_counter()
        into(x, out)
        timings.append(time.perf_counter() - start)
    return min(timings)


def check_agreement():
    """Max abs difference between backends over a wide positive grid."""
    grid = np.logspace(-3.5, 6.0, 4001)
    worst = {}
    for name in FUNCTIONS:
        out_py = np.empty_like(grid)
        out_c = np.empty_like(grid)
        getattr(special_py, f"{name}_into")(grid, out_py)
        getattr(_special, f"{name}_into")(grid, out_c)
        denom = np.maximum(np.abs(out_py), 1.0)
        worst[name] = float(np.max(np.abs(out_py - out_c) / denom))
    return worst


def main():
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument(
        "--sizes",
        default="1000,10000,100000,1000000",
        help="comma-separated buffer sizes",
    )
    parser.add_argument("--repeats", type=int, default=5)
    parser.add_argument("--seed", type=int, default=0)
    args = parser.parse_args()
    sizes = [int(s) for s in args.sizes.split(",")]

    print(f"backend selected by the library at import: {BACKEND}")
    if _special is None:
        print("compiled extension not built; nothing to compare against")
        return

    worst = check_agreement()
    agreement = "  ".join(f"{k} {v:.2e}" for k, v in worst.items())
    print(f"backend agreement (max rel diff over 4001-point grid): {agreement}")
    print()
    print(f"{'function':<10} {'n':>9} {'pure (ms)':>11} {'compiled (ms)':>14} {'speedup':>8}")
    rng = np.random.default_rng(args.seed)
    for n in sizes:
        x = np.exp(rng.uniform(-3.0, 6.0, n))
        out = np.empty_like(x)
        for name in FUNCTIONS:
            t_py = best_time(getattr(special_py, f"{name}_into"), x, out, args.repeats)
            t_c = best_time(getattr(_special, f"{name}_into"), x, out, args.repeats)
            print(
                f"{name:<10} {n:>9} {t_py * 1e3:>11.3f} {t_c * 1e3:>14.3f} "
                f"{t_py / t_c:>7.1f}x"
            )


if __name__ == "__main__":
    main()
