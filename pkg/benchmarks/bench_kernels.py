"""Time the numba kernels against their numpy fallbacks on the same inputs.

    python3 benchmarks/bench_kernels.py [--size 128] [--repeats 3]

The first numba call of each kernel includes JIT compilation (or a cache
load), so it is reported separately from the steady-state best time.
"""
import argparse
import time

import numpy as np
from scipy import ndimage

from calcpheno import kernels
from calcpheno.kernels import _numba, _numpy


def _best(fn, repeats):
    ts = []
    for _ in range(repeats):
        t0 = time.perf_counter()
        fn()
        ts.append(time.perf_counter() - t0)
    return min(ts)


def cases(size, rng):
    noise = ndimage.gaussian_filter(rng.random((size, size, size)), 2.0)
    mask = noise > np.quantile(noise, 0.8)
    labels, n = kernels.label_components(mask, 26, impl=_numpy)
    pts = rng.uniform(0, 2000, (2000, 3))
    return [
        ("label_components (26)", lambda impl: kernels.label_components(mask, 26, impl=impl)),
        ("component_stats", lambda impl: kernels.component_stats(labels, n, impl=impl)),
        ("count_in_mask", lambda impl: kernels.count_in_mask(labels, n, mask, impl=impl)),
        ("block_sums (w=8)", lambda impl: kernels.block_sums(mask, 8, impl=impl)),
        ("dbscan_labels (2000 pts)", lambda impl: kernels.dbscan_labels(pts, 80.0, 3, impl=impl)),
    ]


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--size", type=int, default=128)
    ap.add_argument("--repeats", type=int, default=3)
    args = ap.parse_args()
    rng = np.random.default_rng(0)
    print(f"volume {args.size}^3, best of {args.repeats}")
    print(f"{'kernel':<26} {'numpy s':>9} {'numba 1st':>10} {'numba s':>9} {'speedup':>8}")
    for name, fn in cases(args.size, rng):
        t0 = time.perf_counter()
        fn(_numba)
        first = time.perf_counter() - t0
        tn = _best(lambda: fn(_numba), args.repeats)
        tp = _best(lambda: fn(_numpy), args.repeats)
        print(f"{name:<26} {tp:>9.4f} {first:>10.4f} {tn:>9.4f} {tp / tn:>7.1f}x")


if __name__ == "__main__":
    main()
