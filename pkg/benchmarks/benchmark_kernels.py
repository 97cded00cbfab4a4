"""Benchmark the numba kernels against their pure-numpy fallbacks.

Runs each hot kernel on representative workloads and prints a table of
per-call times plus the speedup.  The active backend for the library itself
is irrelevant here: both variants are imported explicitly.

    python benchmarks/benchmark_kernels.py [--repeats 50]
"""

import argparse
import time

import numpy as np

from phylotopo import kernels
from phylotopo.embedding import one_hot_tips
from phylotopo.likelihood import simulate_alignment, _run_pruning
from phylotopo.trees import TaxaSet, random_unrooted


def timeit(fn, repeats):
    fn()  # warm up (JIT compile on first call)
    times = []
    for _ in range(repeats):
        t0 = time.perf_counter()
        fn()
        times.append(time.perf_counter() - t0)
    return float(np.median(times))


def bench_two_pass(repeats):
    rng = np.random.default_rng(0)
    rows = []
    for n, d in ((500, 8), (2000, 8), (2000, 64)):
        taxa = TaxaSet([f"x{i}" for i in range(n)])
        tree = random_unrooted(taxa, rng)
        tips = rng.standard_normal((tree.n_nodes, d))
        order = tree.traversal()
        deg = np.array([tree.degree(u) for u in range(tree.n_nodes)], float)
        leaf = np.array([tree.is_leaf(u) for u in range(tree.n_nodes)])

        def run(kernel):
            c = np.zeros(tree.n_nodes)
            dv = np.zeros_like(tips)
            out = np.empty_like(tips)
            kernel(order.postorder, order.preorder, order.parent,
                   deg, leaf, tips, c, dv, out)

        t_nb = timeit(lambda: run(kernels.two_pass_numba), repeats)
        t_np = timeit(lambda: run(kernels.two_pass_numpy), repeats)
        rows.append((f"two_pass N={n} d={d}", t_nb, t_np))
    return rows


def bench_pruning(repeats):
    rng = np.random.default_rng(1)
    rows = []
    for n, m in ((16, 200), (64, 500)):
        taxa = TaxaSet([f"x{i}" for i in range(n)])
        tree = random_unrooted(taxa, rng)
        q = rng.uniform(0.02, 0.5, len(tree.edges))
        Y = simulate_alignment(tree, q, m, rng)

        # route through the public wrapper with the backend monkey-patched
        def run(kernel):
            orig = kernels.pruning
            kernels.pruning = kernel
            try:
                _run_pruning(tree, q, Y, want_grad=True)
            finally:
                kernels.pruning = orig

        t_nb = timeit(lambda: run(kernels.pruning_numba), repeats)
        t_np = timeit(lambda: run(kernels.pruning_numpy), repeats)
        rows.append((f"pruning+grad N={n} M={m}", t_nb, t_np))
    return rows


def bench_gather_scatter(repeats):
    rng = np.random.default_rng(2)
    rows = []
    n, k, d = 3584, 3, 64
    x = rng.standard_normal((n, d))
    idx = rng.integers(0, n, size=(n, k))
    idx[rng.random((n, k)) < 0.2] = -1
    g = rng.standard_normal((n, d))
    dst = rng.integers(0, n // 2, size=n)

    def fwd(kernel):
        out = np.zeros((n, d))
        kernel(x, idx, out)

    def bwd(kernel):
        gx = np.zeros((n, d))
        kernel(g, idx, gx)

    def scat(kernel):
        out = np.zeros((n // 2, d))
        kernel(x, dst, out)

    rows.append(("gather_sum (3584x3, d=64)",
                 timeit(lambda: fwd(kernels.gather_sum_numba), repeats),
                 timeit(lambda: fwd(kernels.gather_sum_numpy), repeats)))
    rows.append(("gather_sum_backward",
                 timeit(lambda: bwd(kernels.gather_sum_backward_numba), repeats),
                 timeit(lambda: bwd(kernels.gather_sum_backward_numpy), repeats)))
    rows.append(("scatter_sum",
                 timeit(lambda: scat(kernels.scatter_sum_numba), repeats),
                 timeit(lambda: scat(kernels.scatter_sum_numpy), repeats)))
    return rows


def bench_gru(repeats):
    rng = np.random.default_rng(3)
    n, d = 3584, 64
    mi = rng.standard_normal((n, 3 * d))
    mh = rng.standard_normal((n, 3 * d))
    bi = rng.standard_normal(3 * d)
    bh = rng.standard_normal(3 * d)
    h = rng.standard_normal((n, d))
    gout = rng.standard_normal((n, d))
    r = np.empty((n, d))
    z = np.empty((n, d))
    c = np.empty((n, d))
    out = np.empty((n, d))

    def fwd(kernel):
        kernel(mi, mh, bi, bh, h, r, z, c, out)

    def bwd(kernel):
        dmi = np.empty((n, 3 * d))
        dmh = np.empty((n, 3 * d))
        dbi = np.zeros(3 * d)
        dbh = np.zeros(3 * d)
        dh = np.empty((n, d))
        kernel(gout, mh, bh, h, r, z, c, dmi, dmh, dbi, dbh, dh)

    rows = [
        ("gru_forward (3584, d=64)",
         timeit(lambda: fwd(kernels.gru_forward_numba), repeats),
         timeit(lambda: fwd(kernels.gru_forward_numpy), repeats)),
    ]
    fwd(kernels.gru_forward_numba)
    rows.append(
        ("gru_backward",
         timeit(lambda: bwd(kernels.gru_backward_numba), repeats),
         timeit(lambda: bwd(kernels.gru_backward_numpy), repeats)))
    return rows


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--repeats", type=int, default=50)
    args = ap.parse_args()

    rows = []
    rows += bench_two_pass(args.repeats)
    rows += bench_pruning(args.repeats)
    rows += bench_gather_scatter(args.repeats)
    rows += bench_gru(args.repeats)

    width = max(len(r[0]) for r in rows)
    print(f"{'kernel':<{width}}  {'numba':>10}  {'numpy':>10}  {'speedup':>8}")
    for name, t_nb, t_np in rows:
        print(f"{name:<{width}}  {t_nb * 1e3:>8.3f}ms  {t_np * 1e3:>8.3f}ms  "
              f"{t_np / t_nb:>7.1f}x")


if __name__ == "__main__":
    main()
