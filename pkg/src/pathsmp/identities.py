"""Randomized identity suites: duality, reindexing, adjoint formula, energy."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .backward import energy_identity_check
from .measures import FiniteMeasure
from .path_calculus import (
    KernelRepresentation,
    apply_rho_star,
    apply_rho_star_formula,
    change_of_variables_check,
    duality_residual,
)


@dataclass
class SuiteResult:
    name: str
    n_instances: int
    worst: float
    tol: float

    @property
    def passed(self) -> bool:
        return self.worst <= self.tol

    def row(self) -> dict:
        return {"suite": self.name, "instances": self.n_instances, "worst": self.worst,
                "tol": self.tol, "pass": self.passed}


def random_measure(rng: np.random.Generator, k: int, dt: float, kind: str | None = None) -> FiniteMeasure:
    kind = kind or rng.choice(["dirac0", "diracK", "atoms", "trapezoid"])
    if kind == "dirac0":
        return FiniteMeasure.dirac(0.0, dt)
    if kind == "diracK":
        return FiniteMeasure.dirac(-k * dt, dt)
    if kind == "trapezoid" and k > 0:
        return FiniteMeasure.trapezoid(k * dt, dt)
    n = int(rng.integers(1, min(k + 1, 5) + 1))
    lags = rng.choice(np.arange(-k, 1), size=n, replace=False)
    return FiniteMeasure(lags, rng.uniform(0.1, 2.0, n), dt)


def random_instance(rng: np.random.Generator, kind: str | None = None, P: int | None = None):
    """(rep, Z, Q) with random sizes, path-dependent or constant kernels."""
    N = int(rng.integers(2, 24))
    k = int(rng.integers(0, 9))
    dt = float(rng.choice([0.1, 1 / 32, 0.05]))
    dF, dE = int(rng.integers(1, 4)), int(rng.integers(1, 4))
    P = P or int(rng.integers(1, 5))
    nu = random_measure(rng, k, dt, kind)
    Pk = int(rng.choice([1, P]))
    ker = rng.standard_normal((Pk, N + 1, nu.n_atoms, dF, dE))
    rep = KernelRepresentation(nu, ker, k)
    Z = rng.standard_normal((P, k + N + 1, dE))
    Q = rng.standard_normal((P, N + 1, dF))
    return rep, Z, Q


def duality_suite(n: int = 200, seed: int = 0, tol: float = 1e-12) -> SuiteResult:
    rng = np.random.default_rng(seed)
    worst = 0.0
    for _ in range(n):
        rep, Z, Q = random_instance(rng)
        worst = max(worst, duality_residual(rep, Z, Q).relative)
    return SuiteResult("duality", n, worst, tol)


def change_of_variables_suite(n: int = 200, seed: int = 0, tol: float = 1e-12) -> SuiteResult:
    rng = np.random.default_rng(seed)
    worst = 0.0
    for _ in range(n):
        N = int(rng.integers(1, 30))
        k = int(rng.integers(0, 10))
        dt = float(rng.choice([0.1, 1 / 32]))
        nu = random_measure(rng, k, dt)
        G = rng.standard_normal((N + 1, nu.n_atoms))
        Kp = int(rng.integers(-k, N + 1))
        lhs, rhs = change_of_variables_check(G, nu, Kp, N, k)
        scale = max(abs(lhs), abs(rhs))
        worst = max(worst, abs(lhs - rhs) / scale if scale > 0 else abs(lhs - rhs))
    return SuiteResult("change_of_variables", n, worst, tol)


def adjoint_formula_suite(n: int = 100, seed: int = 0, tol: float = 1e-12) -> SuiteResult:
    """Gathered formula vs scattered transpose; cycles through measure families."""
    rng = np.random.default_rng(seed)
    kinds = ["dirac0", "diracK", "atoms", "trapezoid"]
    worst = 0.0
    for i in range(n):
        rep, _, Q = random_instance(rng, kinds[i % len(kinds)])
        a = apply_rho_star(rep, Q)
        b = apply_rho_star_formula(rep, Q)
        scale = max(float(np.max(np.abs(a))), float(np.max(np.abs(b))))
        err = float(np.max(np.abs(a - b)))
        worst = max(worst, err / scale if scale > 0 else err)
    return SuiteResult("adjoint_formula", n, worst, tol)


def energy_jump_suite(n: int = 20, seed: int = 0) -> SuiteResult:
    """Pure-jump energy balance on dyadic data: the residual is exactly zero."""
    rng = np.random.default_rng(seed)
    worst = 0.0
    for _ in range(n):
        P, N, d = 3, int(rng.integers(2, 20)), int(rng.integers(1, 4))
        h0 = rng.integers(-8, 9, (P, d)) / 4.0
        J = np.zeros((P, N + 1, d))
        J[:, 1:] = rng.integers(-8, 9, (P, N, d)) / 8.0
        rep = energy_identity_check(h0, np.zeros((P, N, d)), np.zeros((P, N, d)), J, 1.0 / N)
        worst = max(worst, rep.residual)
    return SuiteResult("energy_jump", n, worst, 0.0)


def energy_smooth_slope(levels=(16, 32, 64, 128, 256), seed: int = 0, n_paths: int = 64) -> tuple[float, list]:
    """Slope of log(residual) vs log(dt) for a smooth drift plus Brownian martingale part."""
    rng = np.random.default_rng(seed)
    Nf = max(levels)
    dWf = rng.standard_normal((n_paths, Nf, 1)) * np.sqrt(1.0 / Nf)
    res = []
    for N in levels:
        dt = 1.0 / N
        dW = dWf.reshape(n_paths, N, Nf // N, 1).sum(axis=2)
        t = np.arange(N) * dt
        v = np.broadcast_to(np.cos(2 * np.pi * t)[None, :, None] + 1.0, (n_paths, N, 1))
        rep = energy_identity_check(np.ones((n_paths, 1)), v, 0.3 * dW, np.zeros((n_paths, N + 1, 1)), dt)
        res.append(rep.residual)
    slope = float(np.polyfit(np.log([1.0 / N for N in levels]), np.log(res), 1)[0])
    return slope, res


def run_all(seed: int = 0) -> list[SuiteResult]:
    out = [duality_suite(seed=seed), change_of_variables_suite(seed=seed), adjoint_formula_suite(seed=seed),
           energy_jump_suite(seed=seed)]
    slope, _ = energy_smooth_slope(seed=seed)
    out.append(SuiteResult("energy_smooth_slope", 5, abs(slope - 1.0), 0.2))
    return out
