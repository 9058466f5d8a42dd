"""Linear-quadratic specialization: problem builder, closed-form fixed point,
and a dense brute-force oracle for deterministic instances."""
from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np

from .forward import LinearDelayCoefficients
from .measures import FiniteMeasure
from .regression import Conditioner
from .smp import (
    AdjointBundle,
    ControlConstraint,
    ControlProblem,
    Evaluation,
    QuadraticCost,
)
from .spaces import GelfandTriple, OperatorPair, QWienerConfig, TimeGrid, check_coercivity


class LQValidationError(ValueError):
    pass


@dataclass
class LQSpec:
    """dx = [A x + sum_i A1_i x(t+s_i) + C v] dt + [B x + sum_i B1_i x(t+s_i) + D v] dw,
    f = <F x, x> + G1 y + <G2, z> + <N v, v>,  h = <Phi x1, x1>.
    """

    grid: TimeGrid
    A: np.ndarray                   # (d, d) or (N+1, d, d)
    C: np.ndarray                   # (d, d1)
    F: np.ndarray
    Nmat: np.ndarray
    Phi: np.ndarray
    lags: np.ndarray = field(default_factory=lambda: np.array([0]))
    A1: np.ndarray | None = None    # (a, d, d)
    B: np.ndarray | None = None     # (m, d, d)
    B1: np.ndarray | None = None    # (a, m, d, d)
    D: np.ndarray | None = None     # (m, d, d1)
    G1: float = 0.0
    G2: np.ndarray | None = None
    mu1: FiniteMeasure | None = None
    mu2: FiniteMeasure | None = None
    gamma: np.ndarray | None = None
    v0: np.ndarray | None = None
    qcfg: QWienerConfig | None = None
    constraint: ControlConstraint = field(default_factory=ControlConstraint)
    sigma0: np.ndarray | None = None  # (d, m) additive noise
    ops: OperatorPair | None = None   # overrides A, B with declared coercivity constants

    def __post_init__(self):
        g = self.grid
        self.A = np.atleast_2d(np.asarray(self.A, dtype=float))
        d = self.A.shape[-1]
        self.C = np.asarray(self.C, dtype=float).reshape(d, -1)
        d1 = self.C.shape[1]
        self.lags = np.atleast_1d(np.asarray(self.lags, dtype=np.int64))
        a = self.lags.size
        self.A1 = np.zeros((a, d, d)) if self.A1 is None else np.asarray(self.A1, dtype=float).reshape(a, d, d)
        m = 1
        if self.B is not None:
            self.B = np.asarray(self.B, dtype=float)
            m = self.B.reshape(-1, d, d).shape[0]
        elif self.B1 is not None:
            m = np.asarray(self.B1).reshape(a, -1, d, d).shape[1]
        elif self.D is not None:
            m = np.asarray(self.D).reshape(-1, d, d1).shape[0]
        elif self.sigma0 is not None:
            m = np.asarray(self.sigma0).reshape(d, -1).shape[1]
        self.B = np.zeros((m, d, d)) if self.B is None else self.B.reshape(m, d, d)
        self.B1 = np.zeros((a, m, d, d)) if self.B1 is None else np.asarray(self.B1, dtype=float).reshape(a, m, d, d)
        self.D = np.zeros((m, d, d1)) if self.D is None else np.asarray(self.D, dtype=float).reshape(m, d, d1)
        self.sigma0 = np.zeros((d, m)) if self.sigma0 is None else np.asarray(self.sigma0, dtype=float).reshape(d, m)
        self.F = np.asarray(self.F, dtype=float).reshape(d, d)
        self.Phi = np.asarray(self.Phi, dtype=float).reshape(d, d)
        self.Nmat = np.asarray(self.Nmat, dtype=float).reshape(d1, d1)
        self.G2 = np.zeros(m) if self.G2 is None else np.asarray(self.G2, dtype=float).reshape(m)
        self.mu1 = self.mu1 or FiniteMeasure.dirac(0.0, g.dt)
        self.mu2 = self.mu2 or FiniteMeasure.dirac(0.0, g.dt)
        self.gamma = np.ones((g.k + 1, d)) if self.gamma is None else np.asarray(self.gamma, dtype=float).reshape(g.k + 1, d)
        self.v0 = np.zeros((g.k, d1)) if self.v0 is None else np.asarray(self.v0, dtype=float).reshape(g.k, d1)
        self.qcfg = self.qcfg or QWienerConfig.cylindrical(m)

    @property
    def d(self) -> int:
        return self.A.shape[-1]

    @property
    def d1(self) -> int:
        return self.C.shape[1]

    @property
    def m(self) -> int:
        return self.B.shape[0]

    @property
    def deterministic_degenerate(self) -> bool:
        return not (np.any(self.B1) or np.any(self.D) or np.any(self.G2))


@dataclass
class LQCertificate:
    F_min_eig: float
    Phi_min_eig: float
    N_min_eig: float
    coercivity_violation: float

    @property
    def ok(self) -> bool:
        return self.F_min_eig >= -1e-12 and self.Phi_min_eig >= -1e-12 and self.N_min_eig > 0


def certify_lq(spec: LQSpec, triple: GelfandTriple | None = None) -> LQCertificate:
    sym = lambda M: 0.5 * (M + M.T)
    ops = _operators(spec)
    triple = triple or GelfandTriple.flat(spec.d)
    rep = check_coercivity(ops, triple, trials=8, cfg=spec.qcfg)
    return LQCertificate(
        float(np.linalg.eigvalsh(sym(spec.F)).min()),
        float(np.linalg.eigvalsh(sym(spec.Phi)).min()),
        float(np.linalg.eigvalsh(sym(spec.Nmat)).min()),
        rep.max_violation,
    )


def _operators(spec: LQSpec) -> OperatorPair:
    if spec.ops is not None:
        return spec.ops
    g = spec.grid
    n = g.n_steps + 1
    A = spec.A if spec.A.ndim == 3 else np.broadcast_to(spec.A, (n, spec.d, spec.d))
    # coercivity shift: lambda large enough for bounded A (finite-dimensional truncation)
    lam = 2 * float(np.max(np.linalg.norm(A, 2, axis=(1, 2)))) + float(
        np.sum(spec.qcfg.eigenvalues * np.linalg.norm(spec.B, 2, axis=(1, 2)) ** 2))
    return OperatorPair(np.array(A), np.broadcast_to(spec.B, (n,) + spec.B.shape).copy(), alpha=0.0, lam=lam)


def lq_to_problem(spec: LQSpec, triple: GelfandTriple | None = None) -> ControlProblem:
    cert = certify_lq(spec, triple)
    if cert.F_min_eig < -1e-12 or cert.Phi_min_eig < -1e-12:
        raise LQValidationError("F and Phi must be positive semidefinite")
    if not cert.N_min_eig > 0:
        raise LQValidationError(f"N must be uniformly positive definite (min eigenvalue {cert.N_min_eig:g})")
    if cert.coercivity_violation > 1e-10:
        raise LQValidationError(f"(A, B) fails the coercivity check by {cert.coercivity_violation:.3g}")
    coeffs = LinearDelayCoefficients(spec.lags, spec.A1, spec.C, spec.B1, spec.D, s0=spec.sigma0, m=spec.m)
    cost = QuadraticCost(spec.F, spec.Nmat, spec.Phi, spec.G1, spec.G2, m=spec.m)
    return ControlProblem(spec.grid, _operators(spec), coeffs, cost, spec.mu1, spec.mu2, spec.gamma,
                          spec.v0, spec.constraint, spec.qcfg)


def lq_closed_form_control(spec: LQSpec, ev: Evaluation, adj: AdjointBundle) -> np.ndarray:
    """-1/2 N^{-1} E_t[sum_i w_i (C^T pi + D^T q)(t - s_i)] on control nodes 0..N.

    A fixed-point map: ``pi, q`` come from the adjoint solved at the candidate.
    The formula is a stationarity condition only when mu1 is a single unit atom.
    """
    if not (spec.mu1.n_atoms == 1 and abs(spec.mu1.weights[0] - 1.0) < 1e-14):
        warnings.warn("closed-form control is a stationarity condition only for a single unit-mass "
                      "control delay atom", RuntimeWarning, stacklevel=2)
    g = spec.grid
    N, k = g.n_steps, g.k
    pi = adj.sol.p_step
    q = adj.sol.q[:, :N]
    sq = spec.qcfg.sqrt_eig
    w = np.einsum("ac,pna->pnc", spec.C, pi) + np.einsum("jac,pnaj,j->pnc", spec.D, q, sq)
    P = w.shape[0]
    agg = np.zeros((P, N + 1, spec.d1))
    for lag, wt in zip(spec.mu1.lags, spec.mu1.weights):
        off = -int(lag)
        if off < N:
            agg[:, : N - off] += wt * w[:, off:]
    cond: Conditioner = ev.cond
    Ninv = np.linalg.inv(spec.Nmat)
    out = np.zeros((P, k + N + 1, spec.d1))
    out[:, :k] = spec.v0
    for m in range(N + 1):
        out[:, k + m] = -0.5 * cond(m, agg[:, m]) @ Ninv.T
    return out


@dataclass
class QPResult:
    u: np.ndarray          # (1, k+N+1, d1)
    value: float
    hessian_min_eig: float
    H: np.ndarray
    g: np.ndarray
    c: float


def lq_quadratic_form(spec: LQSpec, max_size: int = 2000):
    """J(U) = U^T H U + 2 g^T U + c for the stacked control U = (u_0..u_{N-1}).

    Built by propagating x_n = Phi_n U + c_n through the recursion with dense
    matrices; independent of the solver code paths.
    """
    if not spec.deterministic_degenerate:
        raise LQValidationError("brute-force oracle needs B1 = D = 0 and G2 = 0")
    if np.any(spec.sigma0) or np.any(spec.B):
        warnings.warn("noise terms ignored by the deterministic oracle", RuntimeWarning, stacklevel=2)
    g = spec.grid
    N, k, dt, d, d1 = g.n_steps, g.k, g.dt, spec.d, spec.d1
    nU = N * d1
    if nU > max_size:
        raise LQValidationError(f"QP size {nU} exceeds the guard {max_size}")
    I = np.eye(d)
    A = spec.A if spec.A.ndim == 3 else np.broadcast_to(spec.A, (N + 1, d, d))
    # control at node j (j in -k..N) as an affine map of U
    def u_map(j):
        M = np.zeros((d1, nU))
        if j < 0:
            return M, spec.v0[j + k]
        if j < N:
            M[:, j * d1:(j + 1) * d1] = np.eye(d1)
        return M, np.zeros(d1)

    def v_map(n):
        M = np.zeros((d1, nU))
        c = np.zeros(d1)
        for lag, w in zip(spec.mu1.lags, spec.mu1.weights):
            Mj, cj = u_map(n + int(lag))
            M += w * Mj
            c += w * cj
        return M, c

    Xm = [np.zeros((d, nU)) for _ in range(k + N + 1)]
    Xc = [spec.gamma[j].copy() for j in range(k + 1)] + [np.zeros(d) for _ in range(N)]
    for n in range(N):
        Sinv = I - dt * A[n + 1]
        Vm, Vc = v_map(n)
        rm = Xm[n + k] + dt * spec.C @ Vm
        rc = Xc[n + k] + dt * spec.C @ Vc
        for i, lag in enumerate(spec.lags):
            rm = rm + dt * spec.A1[i] @ Xm[n + k + int(lag)]
            rc = rc + dt * spec.A1[i] @ Xc[n + k + int(lag)]
        Xm[n + k + 1] = np.linalg.solve(Sinv, rm)
        Xc[n + k + 1] = np.linalg.solve(Sinv, rc)
    # y_n = (1 + dt G1) y_{n+1} + dt f_n  =>  weights on each term
    disc = (1.0 + dt * spec.G1) ** np.arange(N + 1)
    H = np.zeros((nU, nU))
    gv = np.zeros(nU)
    c = 0.0
    for n in range(N):
        xm, xc = Xm[n + k], Xc[n + k]
        Vm, Vc = v_map(n)
        w = dt * disc[n]
        H += w * (xm.T @ spec.F @ xm + Vm.T @ spec.Nmat @ Vm)
        gv += w * (xm.T @ spec.F @ xc + Vm.T @ spec.Nmat @ Vc)
        c += w * (xc @ spec.F @ xc + Vc @ spec.Nmat @ Vc)
    x1m = np.zeros((d, nU))
    x1c = np.zeros(d)
    for lag, w in zip(spec.mu2.lags, spec.mu2.weights):
        x1m += w * Xm[N + k + int(lag)]
        x1c += w * Xc[N + k + int(lag)]
    H += disc[N] * x1m.T @ spec.Phi @ x1m
    gv += disc[N] * x1m.T @ spec.Phi @ x1c
    c += disc[N] * x1c @ spec.Phi @ x1c
    H = 0.5 * (H + H.T)
    return H, gv, float(c)


def solve_box_qp(H, gv, lo, hi, tol=1e-13, max_iter=200000):
    """min U^T H U + 2 g^T U over a box, by projected gradient with step 1/L."""
    L = 2 * float(np.linalg.eigvalsh(H).max())
    U = np.clip(-np.linalg.lstsq(H, gv, rcond=1e-12)[0], lo, hi)
    for _ in range(max_iter):
        Un = np.clip(U - (2 * (H @ U + gv)) / L, lo, hi)
        if np.max(np.abs(Un - U)) <= tol:
            return Un
        U = Un
    return U


def lq_bruteforce_deterministic(spec: LQSpec, max_size: int = 2000) -> QPResult:
    H, gv, c = lq_quadratic_form(spec, max_size)
    mine = float(np.linalg.eigvalsh(H).min())
    if spec.constraint.kind == "box":
        U = solve_box_qp(H, gv, spec.constraint.lo, spec.constraint.hi)
    elif spec.constraint.kind == "none":
        # minimum-norm minimizer: controls that never enter v leave H singular
        U = -np.linalg.lstsq(H, gv, rcond=1e-12)[0]
    else:
        raise LQValidationError("brute-force oracle supports none and box constraints")
    val = float(U @ H @ U + 2 * gv @ U + c)
    g = spec.grid
    u = np.zeros((1, g.k + g.n_steps + 1, spec.d1))
    u[0, : g.k] = spec.v0
    u[0, g.k: g.k + g.n_steps] = U.reshape(g.n_steps, spec.d1)
    return QPResult(u, val, mine, H, gv, c)
