#!/usr/bin/env python3
"""Benchmark the compiled pair-pass kernel against the numpy fallback.

Both implementations return bit-identical outputs (asserted here before
timing), so the only difference is speed. Times the full alignment
loss + gradient pass for a grid of (pairs, dim) sizes and prints
microseconds per call and the speedup.

Usage: python scripts/bench_backends.py [--repeats 7] [--inner 20]
"""

import argparse
import time

import numpy as np

from kalign._core import _pairs_py

try:
    from kalign._core import _pairs_cy
except ImportError:
    _pairs_cy = None


def best_time(fn, args, repeats, inner):
    best = float("inf")
    for _ in range(repeats):
        t0 = time.perf_counter()
        for _ in range(inner):
            fn(*args)
        best = min(best, (time.perf_counter() - t0) / inner)
    return best


def main() -> None:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeats", type=int, default=7)
    ap.add_argument("--inner", type=int, default=20)
    args = ap.parse_args()

    if _pairs_cy is None:
        print("compiled extension not importable; numpy fallback only")

    rng = np.random.default_rng(0)
    print(f"{'pairs':>7} {'dim':>5} {'numpy us':>10} {'cython us':>10} {'speedup':>8}")
    for B in (256, 2048, 16384):
        for d in (16, 64, 256):
            m = max(512, B // 4)
            U = rng.standard_normal((m, d))
            ia = rng.integers(0, m, size=B)
            ib = (ia + 1 + rng.integers(0, m - 1, size=B)) % m
            k2 = rng.uniform(-1.0, 1.0, size=B)
            call = (U, k2, ia, ib, 1.0 / d, 1.0, 3)

            t_py = best_time(_pairs_py.norm_poly_pair_pass, call,
                             args.repeats, args.inner)
            if _pairs_cy is None:
                print(f"{B:>7} {d:>5} {t_py * 1e6:>10.1f} {'-':>10} {'-':>8}")
                continue
            a_py, dU_py, dg_py, dc_py = _pairs_py.norm_poly_pair_pass(*call)
            a_cy, dU_cy, dg_cy, dc_cy = _pairs_cy.norm_poly_pair_pass(*call)
            assert (a_py, dg_py, dc_py) == (a_cy, dg_cy, dc_cy)
            assert np.array_equal(dU_py, dU_cy)
            t_cy = best_time(_pairs_cy.norm_poly_pair_pass, call,
                             args.repeats, args.inner)
            print(f"{B:>7} {d:>5} {t_py * 1e6:>10.1f} {t_cy * 1e6:>10.1f} "
                  f"{t_py / t_cy:>7.2f}x")


if __name__ == "__main__":
    main()
