#!/usr/bin/env python3
"""Benchmark the numba kernels against their pure-numpy fallbacks.

Run directly:  python benchmarks/bench_kernels.py [--sizes small|large]

The active production path is chosen by the SOPQ_PURE_NUMPY environment
flag at import; this script ignores the flag and times both
implementations side by side (numba timings exclude the first
compilation call).
"""

import argparse
import time

import numpy as np

from sopq import _kernels
from sopq._kernels import (
    hif_accumulate_np,
    nearest_index_np,
    sop_gemm_real_np,
    _kmeans_dp_core,
)


def _time(fn, *args, repeat=5):
    best = float("inf")
    for _ in range(repeat):
        t0 = time.perf_counter()
        fn(*args)
        best = min(best, time.perf_counter() - t0)
    return best


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--sizes", choices=["small", "large"], default="small")
    args = ap.parse_args()
    big = args.sizes == "large"

    if not _kernels.NUMBA_ACTIVE:
        print("numba inactive (SOPQ_PURE_NUMPY set or import failed); nothing to compare")
        return

    rng = np.random.default_rng(0)
    rows = []

    # nearest-index lookup
    n = 2_000_000 if big else 400_000
    table = np.sort(rng.standard_normal(256))
    v = rng.standard_normal(n)
    nb = lambda: _kernels._nearest_index_nb(v, table)
    nb()  # compile
    rows.append(("nearest_index", n, _time(lambda: nearest_index_np(v, table)), _time(nb)))

    # SOP GEMM real datapath
    t, m, k, g = (64, 64, 4096, 16) if big else (32, 32, 1024, 16)
    qx = rng.standard_normal((t, k))
    qw = rng.standard_normal((m, k))
    sx = rng.random((t, k // g)) + 0.5
    sw = rng.random((m, k // g)) + 0.5
    nb = lambda: _kernels._sop_gemm_real_nb(qx, sx, qw, sw, g)
    nb()
    rows.append(
        (
            "sop_gemm_real",
            t * m * k,
            _time(lambda: sop_gemm_real_np(qx, sx, qw, sw, g)),
            _time(nb),
        )
    )

    # shift-add integer accumulation
    xc = rng.integers(-16, 16, (t, k))
    wc = rng.integers(-16, 16, (m, k))
    xs = rng.integers(0, 5, (t, k))
    ws = rng.integers(0, 4, (m, k))
    nb = lambda: _kernels._hif_accumulate_nb(xc, xs, wc, ws, g)
    nb()
    rows.append(
        (
            "hif_accumulate",
            t * m * k,
            _time(lambda: hif_accumulate_np(xc, xs, wc, ws, g)),
            _time(nb),
        )
    )

    # grid-constrained k-means DP
    npts = 2000 if big else 600
    x = np.sort(rng.standard_normal(npts))
    w = np.ones(npts)
    grid = np.sort(rng.standard_normal(64))
    nb = lambda: _kernels._kmeans_dp_nb(x, w, grid, 16)
    nb()
    rows.append(
        ("kmeans_grid_dp", npts * npts, _time(lambda: _kmeans_dp_core(x, w, grid, 16)), _time(nb))
    )

    print(f"{'kernel':>16}  {'work':>12}  {'numpy/py':>10}  {'numba':>10}  {'speedup':>8}")
    for name, work, t_np, t_nb in rows:
        print(f"{name:>16}  {work:>12,}  {t_np:>10.4f}  {t_nb:>10.4f}  {t_np / t_nb:>7.1f}x")


if __name__ == "__main__":
    main()
