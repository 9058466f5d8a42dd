"""Backward solvers: recursive-cost BSDE, cost adjoint k, and the anticipated
backward equation with running terminal data.

Conventions.  Backward objects live on nodes 0..N+k.  ``q`` is stored as the
coefficient of the raw increment ``dW_j`` (so the mode weight enters through
``sqrt(lam_j)`` wherever ``q`` is paired with a diffusion).  One backward step
of the anticipated equation is

    r_n  = p_{n+1} + zeta_{n+1} dF_{n+1} + dt f0_n
    pi_n = (I - dt M_{n+1})^{-1} r_n
    q_n  = E_n[pi_n dW_n / dt]
    p_n  = E_n[pi_n + dt g(n, p_seg, q_seg)] + dt Nop_n q_n

where the anticipated segments hold ``pi`` before N and the terminal data
after.  With ``M = A^T`` and ``Nop = sqrt(lam) B^T`` this is the exact
transpose of one step of :func:`pathsmp.forward.solve_forward`.
"""
from __future__ import annotations

import csv
from dataclasses import dataclass, field, replace
from typing import Callable

import numpy as np

from .forward import ForwardSolution, NumericalError
from .measures import FiniteMeasure
from .regression import Conditioner
from .spaces import NoiseEnsemble, QWienerConfig


@dataclass(frozen=True)
class RunningTerminal:
    """Increments of F at nodes (1..N) with the datum zeta there.

    ``zeta`` has shape (Pz, J, d) with Pz = 1 or the number of paths.
    """

    nodes: np.ndarray
    dF: np.ndarray
    zeta: np.ndarray

    def __post_init__(self):
        nodes = np.atleast_1d(np.asarray(self.nodes, dtype=np.int64))
        dF = np.atleast_1d(np.asarray(self.dF, dtype=float))
        z = np.asarray(self.zeta, dtype=float)
        if z.ndim == 2:
            z = z[None]
        if nodes.shape != dF.shape or z.shape[1] != nodes.size:
            raise ValueError("nodes, dF and zeta disagree in length")
        if np.any(nodes < 1):
            raise ValueError("running-terminal increments must sit in (0, T]")
        object.__setattr__(self, "nodes", nodes)
        object.__setattr__(self, "dF", dF)
        object.__setattr__(self, "zeta", z)

    @property
    def total_variation(self) -> float:
        return float(np.sum(np.abs(self.dF)))

    @property
    def jump_sizes(self) -> np.ndarray:
        return self.dF

    def increments(self, N: int) -> np.ndarray:
        """zeta * dF scattered on nodes 0..N: shape (Pz, N+1, d)."""
        if self.nodes.size and self.nodes.max() > N:
            raise ValueError("running-terminal node beyond T")
        out = np.zeros((self.zeta.shape[0], N + 1, self.zeta.shape[2]))
        np.add.at(out, (slice(None), self.nodes), self.zeta * self.dF[None, :, None])
        return out

    @classmethod
    def from_jumps(cls, times, sizes, zeta, dt: float) -> "RunningTerminal":
        nodes = np.rint(np.asarray(times, dtype=float) / dt).astype(np.int64)
        return cls(nodes, sizes, zeta)


Generator = Callable[[int, np.ndarray, np.ndarray], np.ndarray]


@dataclass
class ABSEEProblem:
    N: int
    k: int
    dt: float
    d: int
    m: int = 1
    M: np.ndarray | None = None          # (N+1, d, d)
    Nop: np.ndarray | None = None        # (N+1, m, d, d) acting on q[:, :, j]
    generator: Generator | None = None   # g(n, p_seg, q_seg) -> (P, d)
    xi: np.ndarray | None = None         # (Px, k+1, d) on nodes N..N+k
    eta: np.ndarray | None = None        # (Pe, k, d, m) on nodes N+1..N+k
    terminal: RunningTerminal | None = None
    f0: np.ndarray | None = None         # (Pf, N, d) free drift
    L2: float | None = None
    K2: float | None = None
    KF: float | None = None
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.xi is None:
            self.xi = np.zeros((1, self.k + 1, self.d))
        self.xi = np.asarray(self.xi, dtype=float)
        if self.xi.ndim == 2:
            self.xi = self.xi[None]
        if self.eta is None:
            self.eta = np.zeros((1, self.k, self.d, self.m))
        self.eta = np.asarray(self.eta, dtype=float)
        if self.eta.ndim == 3:
            self.eta = self.eta[None]
        if self.xi.shape[1:] != (self.k + 1, self.d):
            raise ValueError(f"xi must have shape (P, {self.k + 1}, {self.d})")
        if self.eta.shape[1:] != (self.k, self.d, self.m):
            raise ValueError(f"eta must have shape (P, {self.k}, {self.d}, {self.m})")
        if self.KF is not None and self.terminal is not None and self.terminal.total_variation > self.KF:
            raise ValueError("running terminal variation exceeds the declared bound K_F")


@dataclass
class BackwardSolution:
    p: np.ndarray        # (P, N+k+1, d) on nodes 0..N+k
    q: np.ndarray        # (P, N+k+1, d, m), q at node N is 0
    p_step: np.ndarray   # (P, N, d): the propagated values pi_n
    dt: float
    k: int
    diagnostics: dict = field(default_factory=dict)

    @property
    def N(self) -> int:
        return self.p_step.shape[1]

    def to_csv(self, path) -> None:
        P, L, d = self.p.shape
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["path", "t"] + [f"p_{i + 1}" for i in range(d)] + ["q_frobenius"])
            for pth in range(P):
                for j in range(L):
                    qf = float(np.sqrt(np.sum(self.q[pth, j] ** 2)))
                    w.writerow([pth, repr(j * self.dt)] + [repr(float(c)) for c in self.p[pth, j]] + [repr(qf)])


def _implicit_inverses(M, dt, N, d):
    if M is None:
        return None
    Mm = np.eye(d)[None] - dt * np.asarray(M, dtype=float)
    cond = np.linalg.cond(Mm)
    bad = np.flatnonzero(~np.isfinite(cond) | (cond > 1e12))
    if bad.size:
        raise np.linalg.LinAlgError(f"I - dt*M singular at node {bad[0]}; reduce the step size")
    return np.linalg.inv(Mm)


def solve_absee(problem: ABSEEProblem, ens: NoiseEnsemble, cond: Conditioner | None = None,
                control_variate: bool = True) -> BackwardSolution:
    """Backward induction for the anticipated equation (see module docstring)."""
    pr = problem
    N, k, dt, d, m = pr.N, pr.k, pr.dt, pr.d, pr.m
    if ens.n_steps != N:
        raise ValueError("ensemble and problem disagree on N")
    cond = cond or Conditioner.identity()
    P = ens.n_paths
    cv = control_variate and not cond.is_identity
    p = np.zeros((P, N + k + 1, d))
    q = np.zeros((P, N + k + 1, d, m))
    p[:, N:] = pr.xi
    q[:, N + 1:] = pr.eta
    seg = p.copy()
    pi_all = np.zeros((P, N, d))
    jumps = pr.terminal.increments(N) if pr.terminal is not None else None
    Minv = _implicit_inverses(pr.M, dt, N, d)
    for n in range(N - 1, -1, -1):
        r = p[:, n + 1].copy()
        if jumps is not None:
            r = r + jumps[:, n + 1]
        if pr.f0 is not None:
            r = r + dt * pr.f0[:, n]
        pi = r @ Minv[n + 1].T if Minv is not None else r
        pi = np.broadcast_to(pi, (P, d))
        seg[:, n] = pi
        pi_all[:, n] = pi
        dWn = ens.dW[:, n]
        if np.any(dWn):
            base = pi - cond(n, pi) if cv else pi
            q[:, n] = cond(n, base[:, :, None] * dWn[:, None, :] / dt)
        val = pi
        if pr.generator is not None:
            val = val + dt * pr.generator(n, seg[:, n:], q[:, n:])
        pn = cond(n, val)
        if pr.Nop is not None:
            pn = pn + dt * np.einsum("jab,pbj->pa", pr.Nop[n], q[:, n])
        p[:, n] = pn
        if not np.all(np.isfinite(pn)):
            bad = int(np.flatnonzero(~np.isfinite(pn).all(axis=1))[0])
            raise NumericalError(f"non-finite adjoint on path {bad} at node {n}")
    return BackwardSolution(p, q, pi_all, dt, k)


# --------------------------------------------------------------------------
# translation


def translation_shift(problem: ABSEEProblem) -> np.ndarray:
    """alpha_n = sum_{m <= n} zeta_m dF_m on nodes 0..N."""
    if problem.terminal is None:
        return np.zeros((1, problem.N + 1, problem.d))
    return np.cumsum(problem.terminal.increments(problem.N), axis=1)


def translate_running_terminal(problem: ABSEEProblem):
    """Remove the running terminal by the shift p_bar = p + alpha.

    Returns ``(translated_problem, alpha, back)`` where ``back`` maps a
    solution of the translated problem to one of the original.
    """
    pr = problem
    N, k, d = pr.N, pr.k, pr.d
    alpha = translation_shift(pr)
    if pr.terminal is None:
        return pr, alpha, lambda sol: sol
    aN = alpha[:, N]
    xi = pr.xi + aN[:, None, :]
    f0 = np.zeros((1, N, d)) if pr.f0 is None else pr.f0
    a_n = alpha[:, :N]
    if pr.M is not None:
        shift = np.einsum("nab,pnb->pna", pr.M[1:N + 1], a_n)
        f0 = f0 - shift
    aseg = np.concatenate([alpha, np.repeat(aN[:, None], k, axis=1)], axis=1)  # nodes 0..N+k
    g = pr.generator
    gbar = None
    if g is not None:
        def gbar(n, ps, qs, _g=g, _a=aseg):
            return _g(n, ps - _a[:, n:], qs)
    newp = replace(pr, xi=xi, terminal=None, f0=f0, generator=gbar, KF=None)

    def back(sol: BackwardSolution) -> BackwardSolution:
        p = sol.p - aseg
        return BackwardSolution(p, sol.q, sol.p_step - a_n, sol.dt, sol.k, dict(sol.diagnostics))

    return newp, alpha, back


# --------------------------------------------------------------------------
# recursive cost


@dataclass
class BSDESolution:
    y: np.ndarray        # (P, N+1)
    z: np.ndarray        # (P, N, m)
    J: float
    stderr: float


def terminal_argument(x: np.ndarray, mu2: FiniteMeasure, k: int) -> np.ndarray:
    """x_{mu2}(T) = sum_i w_i x(T + s_i) for x on nodes -k..N."""
    N = x.shape[1] - k - 1
    out = np.zeros((x.shape[0], x.shape[2]))
    for lag, w in zip(mu2.lags, mu2.weights):
        out += w * x[:, N + lag + k]
    return out


def pathwise_cost(cost, fwd: ForwardSolution, mu2: FiniteMeasure) -> np.ndarray:
    """h(x_{mu2}(T)) + sum dt f along each path; valid when f ignores (y, z)."""
    N, k, dt = fwd.N, fwd.k, fwd.dt
    P = fwd.n_paths
    total = cost.terminal(terminal_argument(fwd.x, mu2, k)).reshape(P).copy()
    for n in range(N):
        X = fwd.X(n, cost.lags)
        v = np.broadcast_to(fwd.V[:, n], (P, fwd.V.shape[2]))
        total += dt * cost.running(n, X, None, None, v).reshape(P)
    return total


def solve_bsde(cost, fwd: ForwardSolution, mu2: FiniteMeasure, ens: NoiseEnsemble,
               cond: Conditioner | None = None, control_variate: bool = True) -> BSDESolution:
    """Backward regression scheme for the recursive cost (y, z)."""
    cond = cond or Conditioner.identity()
    N, k, dt = fwd.N, fwd.k, fwd.dt
    P, m = ens.n_paths, ens.n_modes
    cv = control_variate and not cond.is_identity
    y = np.zeros((P, N + 1))
    z = np.zeros((P, N, m))
    y[:, N] = cost.terminal(terminal_argument(fwd.x, mu2, k)).reshape(P)
    for n in range(N - 1, -1, -1):
        yn1 = y[:, n + 1]
        dWn = ens.dW[:, n]
        if np.any(dWn):
            base = yn1 - cond(n, yn1) if cv else yn1
            z[:, n] = cond(n, base[:, None] * dWn / dt)
        X = fwd.X(n, cost.lags)
        v = np.broadcast_to(fwd.V[:, n], (P, fwd.V.shape[2]))
        f = cost.running(n, X, yn1, z[:, n], v).reshape(P)
        y[:, n] = cond(n, yn1 + dt * f)
    y0 = y[:, 0]
    se = float(np.std(y0) / np.sqrt(P)) if P > 1 else 0.0
    return BSDESolution(y, z, float(np.mean(y0)), se)


def solve_cost_adjoint_k(fy: np.ndarray, fz: np.ndarray, ens: NoiseEnsemble) -> np.ndarray:
    """k_0 = -1, k_{n+1} = k_n + dt fy_n k_n + sum_j fz_{n,j} k_n dW_{n,j}."""
    N, dt, P = ens.n_steps, ens.dt, ens.n_paths
    fy = np.broadcast_to(np.asarray(fy, dtype=float).reshape(-1, N), (P, N))
    fz = np.broadcast_to(np.asarray(fz, dtype=float).reshape(-1, N, ens.n_modes), (P, N, ens.n_modes))
    k = np.empty((P, N + 1))
    k[:, 0] = -1.0
    for n in range(N):
        kn = k[:, n]
        k[:, n + 1] = kn + dt * fy[:, n] * kn + np.sum(fz[:, n] * ens.dW[:, n], axis=1) * kn
        if not np.all(np.isfinite(k[:, n + 1])):
            raise NumericalError(f"non-finite cost adjoint at step {n + 1}")
    return k


# --------------------------------------------------------------------------
# energy identity


@dataclass
class EnergyReport:
    lhs: float
    rhs: float

    @property
    def residual(self) -> float:
        return abs(self.lhs - self.rhs)


def energy_identity_check(h0, v, dM, jumps, dt: float) -> EnergyReport:
    """Discrete energy balance for h_{n+1} = h_n + dt v_n + dM_n + J_{n+1}.

    ``h0`` (P, d); ``v``, ``dM`` (P, N, d); ``jumps`` (P, N+1, d) with the jump
    part zeta dF at each node (entry 0 unused).  The right-hand side uses the
    realized quadratic variation of the martingale part; the jump terms are
    algebraically exact, the smooth part leaves sum dt^2 |v|^2 + 2 dt <v, dM>.
    """
    h0 = np.atleast_2d(np.asarray(h0, dtype=float))
    v = np.asarray(v, dtype=float)
    dM = np.asarray(dM, dtype=float)
    J = np.asarray(jumps, dtype=float)
    P, N, d = v.shape
    h = np.empty((P, N + 1, d))
    h[:, 0] = h0
    for n in range(N):
        h[:, n + 1] = h[:, n] + dt * v[:, n] + dM[:, n] + J[:, n + 1]
    lhs = np.sum(h[:, N] ** 2, axis=1)
    rhs = np.sum(h0**2, axis=1)
    rhs = rhs + 2 * dt * np.sum(h[:, :N] * v, axis=(1, 2))
    rhs = rhs + 2 * np.sum(h[:, :N] * dM, axis=(1, 2)) + np.sum(dM**2, axis=(1, 2))
    rhs = rhs + 2 * np.sum(h[:, 1:] * J[:, 1:], axis=(1, 2)) - np.sum(J[:, 1:] ** 2, axis=(1, 2))
    return EnergyReport(float(np.mean(lhs)), float(np.mean(rhs)))
