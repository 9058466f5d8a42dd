"""Built-in scenarios: lq_basic, heat_spde, nonlinear_delay."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .config import ExperimentConfig
from .forward import SineDelayCoefficients
from .lq import LQSpec, lq_to_problem
from .regression import RegressionBasis
from .smp import ControlConstraint, ControlProblem, QuadraticCost, SolverOptions
from .spaces import (
    GelfandTriple,
    NoiseEnsemble,
    OperatorPair,
    QWienerConfig,
    TimeGrid,
    build_grid,
    sample_noise,
)


@dataclass
class Scenario:
    name: str
    grid: TimeGrid
    problem: ControlProblem
    ens: NoiseEnsemble
    opts: SolverOptions
    spec: LQSpec | None = None
    triple: GelfandTriple | None = None
    snap: dict | None = None


def _constraint(cfg: ExperimentConfig) -> ControlConstraint:
    c = cfg.optimizer.constraint
    return ControlConstraint(c.kind, c.lo, c.hi, c.radius)


def _opts(cfg: ExperimentConfig) -> SolverOptions:
    r = cfg.regression
    return SolverOptions(RegressionBasis(r.degree, r.use_delay, r.ridge), r.adjoint, r.control_variate)


def lq_basic_spec(cfg: ExperimentConfig, grid: TimeGrid, mu1, mu2) -> LQSpec:
    p = cfg.lq_basic
    k = grid.k
    lags = [0, -k] if k > 0 else [0]
    A1 = [[[0.0]], [[p.a1]]] if k > 0 else [[[p.a1]]]
    B1 = [[[[p.b1]]], [[[p.b1_delay]]]] if k > 0 else [[[[p.b1 + p.b1_delay]]]]
    return LQSpec(grid, A=[[p.a]], C=[[p.c]], F=[[p.F]], Nmat=[[p.N]], Phi=[[p.Phi]], lags=lags,
                  A1=A1, B1=B1, D=[[[p.dv]]], sigma0=[[p.sigma0]], G1=p.G1, G2=[p.G2],
                  mu1=mu1, mu2=mu2, gamma=np.full((k + 1, 1), p.gamma), constraint=_constraint(cfg))


def heat_basis(n_modes: int) -> np.ndarray:
    """Wavenumbers of the real Fourier basis (1, cos 2 pi j x, sin 2 pi j x)."""
    return np.concatenate([[0.0], np.repeat(2 * np.pi * np.arange(1, n_modes + 1), 2)])


def heat_derivative(n_modes: int) -> np.ndarray:
    """d/dx on the real Fourier basis: couples each cos/sin pair."""
    d = 2 * n_modes + 1
    Dx = np.zeros((d, d))
    for j in range(1, n_modes + 1):
        c, s = 2 * j - 1, 2 * j
        w = 2 * np.pi * j
        Dx[s, c] = -w   # (cos)' = -w sin
        Dx[c, s] = w    # (sin)' = w cos
    return Dx


def heat_spec(cfg: ExperimentConfig, grid: TimeGrid, mu1, mu2) -> tuple[LQSpec, GelfandTriple]:
    """A = a Laplacian, B = beta d/dx; 2<Au,u> + |Bu|^2 = -(2a - beta^2)|u'|^2.

    With V-weights sqrt(1 + w_j^2) this is coercivity with alpha = lambda = 2a - beta^2.
    """
    p = cfg.heat_spde
    J = p.n_modes
    d = 2 * J + 1
    k = grid.k
    wn = heat_basis(J)
    A = -p.diffusivity * np.diag(wn**2)
    # noise mode 0 is transport (B = beta d/dx); modes 1..3 are additive on the lowest modes
    m = 1 + min(3, d)
    nz = 1.0 if p.noise else 0.0
    B = np.zeros((m, d, d))
    B[0] = nz * p.beta * heat_derivative(J)
    alpha = 2 * p.diffusivity - nz * p.beta**2
    n = grid.n_steps + 1
    ops = OperatorPair(np.broadcast_to(A, (n, d, d)).copy(), np.broadcast_to(B, (n, m, d, d)).copy(),
                       alpha=alpha, lam=alpha, K1=p.diffusivity + p.beta)
    triple = GelfandTriple(np.sqrt(1.0 + wn**2))
    eye = np.eye(d)
    lags = [0, -k] if k > 0 else [0]
    A1 = np.stack([np.zeros((d, d)), p.delay_drift * eye]) if k > 0 else (p.delay_drift * eye)[None]
    B1 = np.zeros((len(lags), m, d, d))
    B1[-1, 0] = nz * p.delay_diffusion * eye
    s0 = np.zeros((d, m))
    for j in range(1, m):
        s0[j - 1, j] = nz * p.additive_noise
    D = np.zeros((m, d, d))
    D[0] = nz * p.control_noise * eye
    # initial segment: constant in time, two low modes
    gamma = np.zeros((k + 1, d))
    gamma[:, 0] = 1.0
    gamma[:, 1] = 0.5
    spec = LQSpec(grid, A=ops.A, C=p.control_gain * eye, F=eye, Nmat=p.control_penalty * eye,
                  Phi=p.terminal_weight * eye, lags=lags, A1=A1, B=B, B1=B1, D=D, sigma0=s0,
                  mu1=mu1, mu2=mu2, gamma=gamma, constraint=_constraint(cfg), ops=ops)
    return spec, triple


def nonlinear_problem(cfg: ExperimentConfig, grid: TimeGrid, mu1, mu2) -> ControlProblem:
    p = cfg.nonlinear_delay
    k = grid.k
    coeffs = SineDelayCoefficients(k, 0.0, p.c1, p.cv, p.s0, p.s1, p.s2, p.sv)
    ops = OperatorPair.constant(grid, [[p.a]], [[[0.0]]], lam=2 * abs(p.a))
    cost = QuadraticCost([[p.F]], [[p.N]], [[p.Phi]])
    return ControlProblem(grid, ops, coeffs, cost, mu1, mu2, np.full((k + 1, 1), p.gamma),
                          constraint=_constraint(cfg))


def build_scenario(cfg: ExperimentConfig, n_paths: int | None = None, seed: int | None = None) -> Scenario:
    g = cfg.grid
    grid = build_grid(g.T, g.K, g.n_steps)
    mu1, s1 = cfg.measures.mu1.build(grid.dt, grid.K)
    mu2, s2 = cfg.measures.mu2.build(grid.dt, grid.K)
    snap = {"mu1": s1, "mu2": s2}
    P = cfg.mc.n_paths if n_paths is None else n_paths
    sd = cfg.mc.seed if seed is None else seed
    opts = _opts(cfg)
    spec = triple = None
    if cfg.scenario == "lq_basic":
        spec = lq_basic_spec(cfg, grid, mu1, mu2)
        prob = lq_to_problem(spec)
    elif cfg.scenario == "heat_spde":
        spec, triple = heat_spec(cfg, grid, mu1, mu2)
        prob = lq_to_problem(spec, triple)
    else:
        prob = nonlinear_problem(cfg, grid, mu1, mu2)
    qcfg = prob.qcfg or QWienerConfig.cylindrical(prob.m)
    ens = sample_noise(qcfg, grid, P, sd)
    return Scenario(cfg.scenario, grid, prob, ens, opts, spec, triple, snap)


SCENARIOS = ("lq_basic", "heat_spde", "nonlinear_delay")
