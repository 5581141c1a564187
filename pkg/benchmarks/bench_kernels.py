"""Benchmark the numba-compiled kernels against the pure-numpy fallback.

Run:  python3 benchmarks/bench_kernels.py
The fallback path can also be forced process-wide with MEDLM_NO_NUMBA=1;
here both variants are imported directly so one run compares them.
"""

import time

import numpy as np

from medlm import kernels


def _time(fn, repeats=5):
    best = float("inf")
    for _ in range(repeats):
        t0 = time.perf_counter()
        fn()
        best = min(best, time.perf_counter() - t0)
    return best


def bench_lcs():
    print("lcs_length (char-level ROUGE-L backbone)")
    rng = np.random.default_rng(0)
    for n in (64, 256, 1024):
        a = rng.integers(0, 50, size=n).astype(np.int64)
        b = rng.integers(0, 50, size=n).astype(np.int64)
        if kernels.USE_NUMBA:
            kernels.lcs_length(a[:4], b[:4])  # trigger compilation
        assert kernels.lcs_length(a, b) == kernels.lcs_length_py(a, b)
        t_active = _time(lambda: kernels.lcs_length(a, b))
        t_py = _time(lambda: kernels.lcs_length_py(a, b))
        label = "numba" if kernels.USE_NUMBA else "numpy"
        print(f"  n={n:5d}  {label}: {t_active*1e3:8.3f} ms   "
              f"numpy fallback: {t_py*1e3:8.3f} ms   "
              f"speedup x{t_py/t_active:6.1f}")


def bench_adamw():
    print("adamw_update (optimizer inner loop)")
    rng = np.random.default_rng(1)
    for n in (10_000, 100_000, 1_000_000):
        w = rng.standard_normal(n)
        g = rng.standard_normal(n)
        m = np.zeros(n)
        v = np.zeros(n)
        if kernels.USE_NUMBA:
            kernels.adamw_update(w[:8].copy(), g[:8], m[:8].copy(), v[:8].copy(),
                                 1, 1e-3, 0.01, 0.9, 0.999, 1e-8)
        w1, m1, v1 = w.copy(), m.copy(), v.copy()
        w2, m2, v2 = w.copy(), m.copy(), v.copy()
        t_active = _time(lambda: kernels.adamw_update(
            w1, g, m1, v1, 1, 1e-3, 0.01, 0.9, 0.999, 1e-8))
        t_py = _time(lambda: kernels.adamw_update_py(
            w2, g, m2, v2, 1, 1e-3, 0.01, 0.9, 0.999, 1e-8))
        label = "numba" if kernels.USE_NUMBA else "numpy"
        print(f"  n={n:8d}  {label}: {t_active*1e3:8.3f} ms   "
              f"numpy fallback: {t_py*1e3:8.3f} ms   "
              f"speedup x{t_py/t_active:6.1f}")


if __name__ == "__main__":
    print(f"active path: {'numba' if kernels.USE_NUMBA else 'numpy fallback'}")
    bench_lcs()
    bench_adamw()
