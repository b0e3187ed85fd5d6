#!/usr/bin/env python3
"""Benchmark the index hot kernels: numba-jitted vs pure-numpy fallback.

Both paths produce identical results (see tests/test_kernels.py); this
script measures the speed difference on synthetic posting lists.

Usage: python3 benchmarks/kernel_bench.py [--postings N] [--repeats R]
"""

import argparse
import time

import numpy as np

from csplade import _kernels


def time_fn(fn, repeats):
    best = float("inf")
    for _ in range(repeats):
        t0 = time.perf_counter()
        fn()
        best = min(best, time.perf_counter() - t0)
    return best


def bench_accumulate(n_postings, n_docs, repeats):
    rng = np.random.default_rng(0)
    ordinals = np.sort(rng.choice(n_docs, size=n_postings, replace=False)).astype(np.int64)
    impacts = rng.uniform(0.1, 3.0, size=n_postings)
    acc = np.zeros(n_docs)
    rows = []
    for name, fn in (("numba", _kernels._accumulate_jit),
                     ("numpy", _kernels._accumulate_np)):
        fn(ordinals, impacts, 1.0, acc)  # warm up / compile
        t = time_fn(lambda: fn(ordinals, impacts, 1.0, acc), repeats)
        rows.append((f"accumulate_postings[{name}]", n_postings, t))
    return rows


def bench_varint(n_values, repeats):
    rng = np.random.default_rng(1)
    values = rng.integers(0, 2 ** 20, size=n_values, dtype=np.uint64)
    out = np.empty(n_values * 5 + 1, dtype=np.uint8)
    rows = []
    for name, enc, dec in (("numba", _kernels._varint_encode_jit, _kernels._varint_decode_jit),
                           ("numpy", _kernels._varint_encode_np, _kernels._varint_decode_np)):
        n = enc(values, out)  # warm up / compile
        buf = out[:n].copy()
        decoded = np.empty(n_values, dtype=np.uint64)
        dec(buf, n_values, decoded)
        rows.append((f"varint_encode[{name}]", n_values,
                     time_fn(lambda: enc(values, out), repeats)))
        rows.append((f"varint_decode[{name}]", n_values,
                     time_fn(lambda: dec(buf, n_values, decoded), repeats)))
    return rows


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--postings", type=int, default=500_000)
    ap.add_argument("--docs", type=int, default=1_000_000)
    ap.add_argument("--repeats", type=int, default=5)
    args = ap.parse_args()

    if not _kernels.USE_NUMBA:
        print("note: CSPLADE_NUMBA=0, the 'numba' rows below run the same "
              "undecorated python code as the fallback")

    rows = bench_accumulate(args.postings, args.docs, args.repeats)
    rows += bench_varint(args.postings, args.repeats)

    print(f"{'kernel':<34} {'n':>10} {'best ms':>10} {'M ops/s':>10}")
    for name, n, t in rows:
        print(f"{name:<34} {n:>10} {t * 1e3:>10.3f} {n / t / 1e6:>10.1f}")

    # speedup summary per kernel pair
    print()
    by_kernel = {}
    for name, _, t in rows:
        base, impl = name[:-1].rsplit("[", 1)
        by_kernel.setdefault(base, {})[impl] = t
    for base, impls in by_kernel.items():
        if {"numba", "numpy"} <= impls.keys():
            print(f"{base}: numba is {impls['numpy'] / impls['numba']:.1f}x "
                  f"vs the numpy fallback")


if __name__ == "__main__":
    main()
