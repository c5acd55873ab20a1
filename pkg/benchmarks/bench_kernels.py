#!/usr/bin/env python3
"""Benchmark the numba kernels against the pure-numpy fallbacks.

The kernels are the non-BLAS inner loops of the package: per-row top-k
selection, capacity-limited greedy dispatch, exact GELU, and row scatter-add.
Matrix products dominate at training scale, but these loops dominate routing
at large token counts, which is what this table shows.

Usage: python benchmarks/bench_kernels.py [--tokens N] [--experts N] [--repeat R]
"""

from __future__ import annotations

import argparse
import time

import numpy as np

from hetmoe import backend, kernels


def _time(fn, repeat: int) -> float:
    best = float("inf")
    for _ in range(repeat):
        t0 = time.perf_counter()
        fn()
        best = min(best, time.perf_counter() - t0)
    return best


def run(n_tokens: int, n_experts: int, k: int, dim: int, repeat: int) -> None:
    rng = np.random.default_rng(0)
    scores = rng.normal(size=(n_tokens, n_experts))
    selected = kernels.topk_rows(scores, k)
    caps = np.full(n_experts, int(1.1 * k * n_tokens / n_experts) + 1, dtype=np.int64)
    flat = rng.normal(size=n_tokens * dim)
    grad = rng.normal(size=n_tokens * dim)
    idx = rng.integers(0, n_tokens, size=n_tokens)
    rows = rng.normal(size=(n_tokens, dim))

    cases = [
        ("topk_rows", lambda: kernels.topk_rows(scores, k)),
        ("greedy_dispatch", lambda: kernels.greedy_dispatch(selected, caps)),
        ("gelu_fwd", lambda: kernels.gelu_fwd(flat)),
        ("gelu_bwd", lambda: kernels.gelu_bwd(flat, grad)),
        ("scatter_rows_add", lambda: kernels.scatter_rows_add(np.zeros((n_tokens, dim)), idx, rows)),
    ]

    backends = ["numpy"]
    if backend.NUMBA_AVAILABLE:
        backends.insert(0, "numba")
    else:
        print("numba unavailable; timing the numpy path only")

    results: dict[str, dict[str, float]] = {name: {} for name, _ in cases}
    for b in backends:
        backend.set_backend(b)
        for name, fn in cases:
            fn()  # warm (jit compile on the numba path)
            results[name][b] = _time(fn, repeat)
    backend.set_backend("auto")

    print(f"\ntokens={n_tokens} experts={n_experts} k={k} dim={dim} "
          f"(best of {repeat})")
    header = f"{'kernel':<18}" + "".join(f"{b + ' (ms)':>14}" for b in backends)
    if len(backends) == 2:
        header += f"{'speedup':>10}"
    print(header)
    for name, _ in cases:
        row = f"{name:<18}"
        for b in backends:
            row += f"{results[name][b] * 1e3:>14.3f}"
        if len(backends) == 2:
            row += f"{results[name]['numpy'] / results[name]['numba']:>9.1f}x"
        print(row)


def main() -> None:
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--tokens", type=int, default=100_000)
    parser.add_argument("--experts", type=int, default=64)
    parser.add_argument("--k", type=int, default=2)
    parser.add_argument("--dim", type=int, default=64)
    parser.add_argument("--repeat", type=int, default=5)
    args = parser.parse_args()
    run(args.tokens, args.experts, args.k, args.dim, args.repeat)


if __name__ == "__main__":
    main()
