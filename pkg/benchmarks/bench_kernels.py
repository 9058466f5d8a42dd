"""Compare the compiled and pure-Python delay-kernel backends.

Usage: python3 benchmarks/bench_kernels.py [--paths 256] [--steps 128] [--repeat 5]
"""
import argparse
import timeit

import numpy as np

from pathsmp import kernels
from pathsmp.measures import FiniteMeasure


def make_case(P, N, k, d, seed=0):
    rng = np.random.default_rng(seed)
    dt = 1.0 / N
    nu = FiniteMeasure.trapezoid(k * dt, dt)
    ker = rng.standard_normal((P, N + 1, nu.n_atoms, d, d))
    Z = rng.standard_normal((P, k + N + 1, d))
    Q = rng.standard_normal((P, N + 1, d))
    return ker, nu, Z, Q


def main(argv=None):
    ap = argparse.ArgumentParser()
    ap.add_argument("--paths", type=int, default=256)
    ap.add_argument("--steps", type=int, default=128)
    ap.add_argument("--delay", type=int, default=32)
    ap.add_argument("--dim", type=int, default=2)
    ap.add_argument("--repeat", type=int, default=5)
    a = ap.parse_args(argv)
    ker, nu, Z, Q = make_case(a.paths, a.steps, a.delay, a.dim)
    backends = kernels.available_backends()
    print(f"P={a.paths} N={a.steps} k={a.delay} d={a.dim}; backends: {', '.join(backends)}")
    ref = {}
    for name, impl in backends.items():
        ops = {
            "rho_apply": lambda: kernels.rho_apply(ker, nu.lags, nu.weights, Z, a.delay, impl=impl),
            "rho_star_scatter": lambda: kernels.rho_star_scatter(ker, nu.lags, nu.weights, Q, a.delay, impl=impl),
            "rho_star_gather": lambda: kernels.rho_star_gather(ker, nu.lags, nu.weights, Q, a.delay, impl=impl),
        }
        for op, fn in ops.items():
            out = fn()
            err = float(np.max(np.abs(out - ref[op]))) if op in ref else 0.0
            ref.setdefault(op, out)
            t = min(timeit.repeat(fn, number=1, repeat=a.repeat))
            print(f"{name:>8s} {op:<17s} {t * 1e3:9.2f} ms   max|diff| {err:.1e}")


if __name__ == "__main__":
    main()
