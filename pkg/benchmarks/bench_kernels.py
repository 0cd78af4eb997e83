"""Benchmark the numba kernels against the pure-numpy fallback.

Usage: python benchmarks/bench_kernels.py [--repeat N]

Times the three hot kernels (Hermite pair tensors, stage-cost reduction,
Bellman relaxation), a linear-ODE integration pass, and one full DP solve on
the logistic instance under both backends.
"""

import argparse
import time

import numpy as np

from pwlbvp import DpConfig, Mesh, kernels, solve_dp
from pwlbvp.problems import builtin


def timeit(fn, repeat):
    fn()  # warm up (numba compiles here)
    best = np.inf
    for _ in range(repeat):
        t0 = time.perf_counter()
        fn()
        best = min(best, time.perf_counter() - t0)
    return best


def bench_kernels(ker, repeat, P=231, Q=231, M=5, n=2, S=4096):
    rng = np.random.default_rng(0)
    thp, vp = rng.normal(size=(P, n)), rng.normal(size=(P, n))
    thq, vq = rng.normal(size=(Q, n)), rng.normal(size=(Q, n))
    s = np.linspace(0.05, 0.95, M)
    out = {}
    out["hermite_pair"] = timeit(lambda: ker.hermite_pair(thp, vp, thq, vq, s, 0.125), repeat)
    resid = np.ascontiguousarray(rng.normal(size=(P, Q, M, n)))
    w = np.full(M, 1.0 / M)
    out["pair_cost_sq"] = timeit(lambda: ker.pair_cost_sq(resid, w), repeat)
    out["pair_cost_max"] = timeit(lambda: ker.pair_cost_max(resid), repeat)
    E = rng.exponential(size=(P, Q))
    S_prev = rng.exponential(size=P)
    out["relax_additive"] = timeit(lambda: ker.relax_additive(S_prev, E), repeat)
    out["relax_max"] = timeit(lambda: ker.relax_max(S_prev, E), repeat)
    A = rng.normal(size=(2 * S + 1, n, n)) * 0.1
    B = rng.normal(size=(2 * S + 1, n, 1))
    y0 = rng.normal(size=(n, 1))
    h = np.full(S, 1.0 / S)
    out["rk4_affine"] = timeit(lambda: ker.rk4_affine(A, B, y0, h), repeat)
    return out


def bench_solve(backend):
    kernels.use(backend)
    prob = builtin("logistic", r=1.0, x0=0.2)
    cfg = DpConfig(theta_counts=21, v_counts=11, tube_iterations=1)
    t0 = time.perf_counter()
    _, cost, _ = solve_dp(prob, Mesh.uniform(8), cfg)
    return time.perf_counter() - t0, cost


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--repeat", type=int, default=5)
    args = ap.parse_args()

    from pwlbvp import _kernels_numpy

    results = {"numpy": bench_kernels(_kernels_numpy, args.repeat)}
    try:
        from pwlbvp import _kernels_numba

        results["numba"] = bench_kernels(_kernels_numba, args.repeat)
    except ImportError:
        print("numba unavailable; numpy results only")

    names = sorted(results["numpy"])
    print(f"{'kernel':<16}" + "".join(f"{b:>12}" for b in results) + ("     speedup" if len(results) > 1 else ""))
    for name in names:
        row = f"{name:<16}"
        for b in results:
            row += f"{results[b][name] * 1e3:>10.3f}ms"
        if len(results) > 1:
            row += f"{results['numpy'][name] / results['numba'][name]:>11.1f}x"
        print(row)

    print()
    for backend in results:
        dt, cost = bench_solve(backend)
        print(f"solve_dp logistic [{backend:>5}]: {dt * 1e3:8.1f} ms  (cost {cost:.6e})")


if __name__ == "__main__":
    main()
