"""Benchmark the numba kernels against the pure-NumPy fallbacks.

Times the cut-scan kernels, tree growers and point routing on
benchmark-sized inputs and prints one row per (kernel, backend) with the
speedup.  Run:

    python benchmarks/kernel_benchmark.py [--repeat N]
"""

import argparse
import time

import numpy as np

from hteforest import _kernels_py as kpy

try:
    from hteforest import _kernels_jit as kjit
except ImportError:
    kjit = None


def _time(fn, args, repeat):
    fn(*args)  # warm up (JIT compile on the numba side)
    best = float("inf")
    for _ in range(repeat):
        start = time.perf_counter()
        fn(*args)
        best = min(best, time.perf_counter() - start)
    return best


def make_cases(rng):
    n = 400
    p = 10
    x = rng.normal(size=n)
    psi2 = rng.normal(size=(n, 2))
    psi1 = np.ascontiguousarray(psi2[:, :1])
    arm = rng.integers(0, 2, size=n).astype(np.int64)
    minv = kpy.pinv_sym(psi2.T @ psi2 / n)[0]
    y = rng.normal(size=n)

    X = np.ascontiguousarray(rng.normal(size=(n, p)))
    wb = rng.integers(0, 2, size=n).astype(np.int64)
    u = rng.normal(size=n) + X[:, 0] * (wb - 0.5)
    v = wb - 0.5
    cand = np.tile(np.arange(p, dtype=np.int64), (n, 1))

    Xq = np.ascontiguousarray(rng.normal(size=(5000, p)))
    feat, thr, left, right, _nn, _lo, _hi, _rows = kpy.grow_hte_tree(
        X, u, v, wb, True, True, 7, kpy.MAX_DEPTH_SENTINEL, cand, n)

    return [
        ("best_cut_scan_mob", "best_cut_scan_mob",
         (x, psi2, arm, 2, minv, 7)),
        ("best_cut_scan_cf", "best_cut_scan_cf",
         (x, np.ascontiguousarray(psi1[:, 0]), arm, 2, 0.25, 7)),
        ("best_cut_scan_var", "best_cut_scan_var", (x, y, 5)),
        ("grow_hte_tree (mobw, n=400, p=10)", "grow_hte_tree",
         (X, u, v.astype(np.float64), wb, True, True, 7,
          kpy.MAX_DEPTH_SENTINEL, cand, n)),
        ("grow_hte_tree (cf)", "grow_hte_tree",
         (X, u, v.astype(np.float64), wb, False, False, 7,
          kpy.MAX_DEPTH_SENTINEL, cand, n)),
        ("grow_reg_tree (n=400, p=10)", "grow_reg_tree",
         (X, y, 5, cand, n, kpy.MAX_DEPTH_SENTINEL)),
        ("route_points (5000 x depth)", "route_points",
         (Xq, feat, thr, left, right)),
    ]


def main():
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--repeat", type=int, default=20)
    args = parser.parse_args()

    rng = np.random.default_rng(0)
    cases = make_cases(rng)
    print(f"{'kernel':<36} {'numpy':>10} {'numba':>10} {'speedup':>8}")
    for label, name, fargs in cases:
        t_py = _time(getattr(kpy, name), fargs, args.repeat)
        if kjit is None:
            print(f"{label:<36} {t_py * 1e6:>8.0f}us {'n/a':>10} {'n/a':>8}")
            continue
        t_jit = _time(getattr(kjit, name), fargs, args.repeat)
        print(f"{label:<36} {t_py * 1e6:>8.0f}us {t_jit * 1e6:>8.0f}us "
              f"{t_py / t_jit:>7.1f}x")


if __name__ == "__main__":
    main()
