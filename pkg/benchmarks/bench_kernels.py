#!/usr/bin/env python3
"""Benchmark the numba kernels against their pure-numpy fallbacks.

Covers the two dual-backend kernel families:
  1. banded local-window + global-token attention (forward and backward)
  2. LCS table fill (summary scoring)

Usage:
    python benchmarks/bench_kernels.py
    python benchmarks/bench_kernels.py --sizes 512 2048 8192 --output results.json

Run with OPENBLAS_NUM_THREADS=1 for stable single-core numbers. The numpy
fallback is selected at import time by RETROSUM_NUMBA=0; here both paths are
called explicitly via the use_numba argument.
"""

import argparse
import json
import time

import numpy as np

from retrosum import kernels


def _inputs(n, heads=2, dh=32, r=127, block=16, seed=0):
    rng = np.random.default_rng(seed)
    nb = -(-n // block)
    q = rng.standard_normal((heads, n, dh)).astype(np.float32)
    k = rng.standard_normal((heads, n, dh)).astype(np.float32)
    v = rng.standard_normal((heads, n, dh)).astype(np.float32)
    kg = rng.standard_normal((heads, nb, dh)).astype(np.float32)
    vg = rng.standard_normal((heads, nb, dh)).astype(np.float32)
    valid = np.ones(n, dtype=bool)
    gvalid = np.ones(nb, dtype=bool)
    return q, k, v, kg, vg, valid, gvalid


def time_call(fn, repeats):
    best = float("inf")
    for _ in range(repeats):
        t0 = time.perf_counter()
        fn()
        best = min(best, time.perf_counter() - t0)
    return best * 1000.0


def bench_tglobal(sizes, r, repeats):
    print(f"\nbanded+global attention (r={r}, k=16, heads=2, dh=32)")
    print(f"{'n':>7} {'fwd numba (ms)':>15} {'fwd numpy (ms)':>15} {'bwd numba (ms)':>15} {'bwd numpy (ms)':>15} {'fwd speedup':>12}")
    rows = []
    for n in sizes:
        q, k, v, kg, vg, valid, gvalid = _inputs(n, r=r)
        args = (q, k, v, kg, vg, r, valid, gvalid)
        # warm both paths (JIT compile, allocator)
        out, pl, pg = kernels.tglobal_forward(*args, use_numba=True)
        kernels.tglobal_forward(*args, use_numba=False)
        dout = np.ones_like(out)
        bwd_args = (dout, q, k, v, kg, vg, r, pl, pg)
        kernels.tglobal_backward(*bwd_args, use_numba=True)
        kernels.tglobal_backward(*bwd_args, use_numba=False)

        fwd_nb = time_call(lambda: kernels.tglobal_forward(*args, use_numba=True), repeats)
        fwd_np = time_call(lambda: kernels.tglobal_forward(*args, use_numba=False), repeats)
        bwd_nb = time_call(lambda: kernels.tglobal_backward(*bwd_args, use_numba=True), repeats)
        bwd_np = time_call(lambda: kernels.tglobal_backward(*bwd_args, use_numba=False), repeats)
        speedup = fwd_np / fwd_nb if fwd_nb > 0 else float("inf")
        print(f"{n:>7} {fwd_nb:>15.2f} {fwd_np:>15.2f} {bwd_nb:>15.2f} {bwd_np:>15.2f} {speedup:>11.1f}x")
        rows.append({"n": n, "fwd_numba_ms": fwd_nb, "fwd_numpy_ms": fwd_np,
                     "bwd_numba_ms": bwd_nb, "bwd_numpy_ms": bwd_np, "fwd_speedup": speedup})
    return rows


def bench_lcs(lengths, repeats):
    print(f"\nLCS table fill")
    print(f"{'len':>7} {'numba (ms)':>12} {'python (ms)':>12} {'speedup':>10}")
    rows = []
    rng = np.random.default_rng(1)
    for n in lengths:
        a = rng.integers(0, 50, size=n)
        b = rng.integers(0, 50, size=n)
        kernels.lcs_length(a, b, use_numba=True)  # JIT warmup
        t_nb = time_call(lambda: kernels.lcs_length(a, b, use_numba=True), repeats)
        t_py = time_call(lambda: kernels.lcs_length(a, b, use_numba=False), max(1, repeats // 2))
        speedup = t_py / t_nb if t_nb > 0 else float("inf")
        print(f"{n:>7} {t_nb:>12.3f} {t_py:>12.3f} {speedup:>9.1f}x")
        rows.append({"len": n, "numba_ms": t_nb, "python_ms": t_py, "speedup": speedup})
    return rows


def main():
    parser = argparse.ArgumentParser(description="numba vs numpy kernel benchmark")
    parser.add_argument("--sizes", type=int, nargs="+", default=[512, 2048, 4096])
    parser.add_argument("--lcs-lengths", type=int, nargs="+", default=[100, 300, 1000])
    parser.add_argument("--r", type=int, default=127)
    parser.add_argument("--repeats", type=int, default=3)
    parser.add_argument("--output", help="JSON results path")
    args = parser.parse_args()

    if not kernels.NUMBA_ENABLED:
        print("warning: numba backend unavailable (RETROSUM_NUMBA=0 or numba missing); "
              "numba columns will rerun the numpy path")
    print(f"active backend: {kernels.backend_name()}")

    results = {
        "backend": kernels.backend_name(),
        "tglobal": bench_tglobal(args.sizes, args.r, args.repeats),
        "lcs": bench_lcs(args.lcs_lengths, args.repeats),
    }
    if args.output:
        with open(args.output, "w") as f:
            json.dump(results, f, indent=2)
        print(f"\nresults saved to {args.output}")


if __name__ == "__main__":
    main()
