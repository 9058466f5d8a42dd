"""Maximum-principle gradient machinery.

Sign convention: the cost adjoint starts at k(0) = -1 and the Hamiltonian is
H = <b, p> + <sigma, q> - f k, so the control derivative of H, aggregated over
the control delay and conditioned on F_t, is the gradient of J.  The costate
entering H is the propagated value ``pi`` of the backward step, which makes
the gradient the exact derivative of the discrete objective in deterministic
problems.
"""
from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np

from .backward import (
    ABSEEProblem,
    BackwardSolution,
    BSDESolution,
    RunningTerminal,
    pathwise_cost,
    solve_absee,
    solve_bsde,
    solve_cost_adjoint_k,
    terminal_argument,
)
from .forward import CoefficientSet, ForwardSolution, solve_forward
from .measures import FiniteMeasure
from .path_calculus import KernelRepresentation, apply_rho_star
from .regression import Conditioner, RegressionBasis
from .spaces import NoiseEnsemble, OperatorPair, QWienerConfig, TimeGrid


# --------------------------------------------------------------------------
# costs and constraints


class CostSpec:
    """Running cost f(t, X, y, z, v) and terminal cost h(x1).

    ``X`` is (P, a, d) read at ``lags``; ``y`` (P,), ``z`` (P, m), ``v`` (P, d1).
    """

    lags: np.ndarray = np.array([0])
    depends_on_yz: bool = False

    def running(self, n, X, y, z, v):
        raise NotImplementedError

    def running_dx(self, n, X, y, z, v):
        raise NotImplementedError

    def running_dy(self, n, X, y, z, v):
        return np.zeros(X.shape[0])

    def running_dz(self, n, X, y, z, v):
        return np.zeros((X.shape[0], self.m))

    def running_dv(self, n, X, y, z, v):
        raise NotImplementedError

    def terminal(self, x1):
        raise NotImplementedError

    def terminal_dx(self, x1):
        raise NotImplementedError


class QuadraticCost(CostSpec):
    """f = <F x, x> + G1 y + <G2, z> + <N v, v>,  h = <Phi x1, x1>."""

    def __init__(self, F, Nmat, Phi, G1: float = 0.0, G2=None, m: int = 1):
        self.F = np.atleast_2d(np.asarray(F, dtype=float))
        self.Nmat = np.atleast_2d(np.asarray(Nmat, dtype=float))
        self.Phi = np.atleast_2d(np.asarray(Phi, dtype=float))
        self.G1 = float(G1)
        self.G2 = np.zeros(m) if G2 is None else np.atleast_1d(np.asarray(G2, dtype=float))
        self.m = self.G2.size
        self.lags = np.array([0])
        self.depends_on_yz = self.G1 != 0.0 or bool(np.any(self.G2))

    def _F(self, n):
        return self.F[n] if self.F.ndim == 3 else self.F

    def _N(self, n):
        return self.Nmat[n] if self.Nmat.ndim == 3 else self.Nmat

    def running(self, n, X, y, z, v):
        x = X[:, 0]
        out = np.einsum("pa,ab,pb->p", x, self._F(n), x) + np.einsum("pa,ab,pb->p", v, self._N(n), v)
        if self.G1 and y is not None:
            out = out + self.G1 * y
        if np.any(self.G2) and z is not None:
            out = out + z @ self.G2
        return out

    def running_dx(self, n, X, y, z, v):
        F = self._F(n)
        return ((F + F.T) @ X[:, 0].T).T[:, None, :]

    def running_dy(self, n, X, y, z, v):
        return np.full(X.shape[0], self.G1)

    def running_dz(self, n, X, y, z, v):
        return np.broadcast_to(self.G2, (X.shape[0], self.m))

    def running_dv(self, n, X, y, z, v):
        Nm = self._N(n)
        return v @ (Nm + Nm.T).T

    def terminal(self, x1):
        return np.einsum("pa,ab,pb->p", x1, self.Phi, x1)

    def terminal_dx(self, x1):
        return x1 @ (self.Phi + self.Phi.T).T


class CallableCost(CostSpec):
    """Cost from callables; missing derivatives are zero."""

    def __init__(self, running, terminal, lags=(0,), m: int = 1, dx=None, dy=None, dz=None, dv=None,
                 terminal_dx=None, depends_on_yz: bool = False):
        self._f, self._h = running, terminal
        self._dx, self._dy, self._dz, self._dv, self._hx = dx, dy, dz, dv, terminal_dx
        self.lags = np.atleast_1d(np.asarray(lags, dtype=np.int64))
        self.m = m
        self.depends_on_yz = depends_on_yz or dy is not None or dz is not None

    def running(self, n, X, y, z, v):
        return np.broadcast_to(np.asarray(self._f(n, X, y, z, v), dtype=float), (X.shape[0],))

    def running_dx(self, n, X, y, z, v):
        if self._dx is None:
            return np.zeros(X.shape)
        return np.asarray(self._dx(n, X, y, z, v), dtype=float).reshape(X.shape)

    def running_dy(self, n, X, y, z, v):
        if self._dy is None:
            return np.zeros(X.shape[0])
        return np.broadcast_to(np.asarray(self._dy(n, X, y, z, v), dtype=float), (X.shape[0],))

    def running_dz(self, n, X, y, z, v):
        if self._dz is None:
            return np.zeros((X.shape[0], self.m))
        return np.asarray(self._dz(n, X, y, z, v), dtype=float).reshape(X.shape[0], self.m)

    def running_dv(self, n, X, y, z, v):
        if self._dv is None:
            return np.zeros(v.shape)
        return np.asarray(self._dv(n, X, y, z, v), dtype=float).reshape(v.shape)

    def terminal(self, x1):
        return np.broadcast_to(np.asarray(self._h(x1), dtype=float), (x1.shape[0],))

    def terminal_dx(self, x1):
        if self._hx is None:
            return np.zeros(x1.shape)
        return np.asarray(self._hx(x1), dtype=float).reshape(x1.shape)


@dataclass(frozen=True)
class ControlConstraint:
    kind: str = "none"          # none | box | ball
    lo: float | np.ndarray = -np.inf
    hi: float | np.ndarray = np.inf
    radius: float = np.inf

    def __post_init__(self):
        if self.kind not in ("none", "box", "ball"):
            raise ValueError(f"unknown constraint kind {self.kind!r}")
        if self.kind == "box" and np.any(np.asarray(self.lo) > np.asarray(self.hi)):
            raise ValueError("box constraint with lo > hi")
        if self.kind == "ball" and not self.radius >= 0:
            raise ValueError("ball radius must be nonnegative")

    def project(self, u: np.ndarray) -> np.ndarray:
        if self.kind == "none":
            return u
        if self.kind == "box":
            return np.clip(u, self.lo, self.hi)
        nrm = np.linalg.norm(u, axis=-1, keepdims=True)
        scale = np.where(nrm > self.radius, self.radius / np.maximum(nrm, 1e-300), 1.0)
        return u * scale

    def contains(self, u: np.ndarray, tol: float = 1e-12) -> bool:
        return bool(np.all(np.abs(self.project(u) - u) <= tol))


@dataclass
class ControlProblem:
    grid: TimeGrid
    ops: OperatorPair
    coeffs: CoefficientSet
    cost: CostSpec
    mu1: FiniteMeasure
    mu2: FiniteMeasure
    gamma: np.ndarray                       # (k+1, d) on nodes -k..0
    v0: np.ndarray | None = None            # (k, d1) on nodes -k..-1
    constraint: ControlConstraint = field(default_factory=ControlConstraint)
    qcfg: QWienerConfig | None = None

    def __post_init__(self):
        g = self.grid
        self.gamma = np.asarray(self.gamma, dtype=float).reshape(g.k + 1, self.coeffs.d)
        if self.v0 is None:
            self.v0 = np.zeros((g.k, self.coeffs.d1))
        self.v0 = np.asarray(self.v0, dtype=float).reshape(g.k, self.coeffs.d1)
        if self.qcfg is None:
            self.qcfg = QWienerConfig.cylindrical(self.ops.m)
        if self.ops.A.shape[0] != g.n_steps + 1:
            raise ValueError("operator pair must be indexed on nodes 0..N")

    @property
    def d(self) -> int:
        return self.coeffs.d

    @property
    def d1(self) -> int:
        return self.coeffs.d1

    @property
    def m(self) -> int:
        return self.ops.m

    def control(self, values=0.0) -> np.ndarray:
        """Control array (1, k+N+1, d1): v0 on [-K, 0), ``values`` on [0, T]."""
        g = self.grid
        u = np.zeros((1, g.k + g.n_steps + 1, self.d1))
        u[0, : g.k] = self.v0
        vals = np.asarray(values, dtype=float)
        if vals.ndim == 3:
            return np.concatenate([np.broadcast_to(u[:, : g.k], (vals.shape[0], g.k, self.d1)), vals], axis=1)
        u[0, g.k:] = vals
        return u


@dataclass(frozen=True)
class SolverOptions:
    """``basis=None`` uses the identity conditioner (deterministic problems).

    ``adjoint='pathwise'`` keeps the adjoint unconditioned (exact backprop of
    the sample objective) and conditions only the final gradient.
    ``anchor_basis`` makes the optimizer regress every iterate on the features
    of the initial forward path, so all iterates live in one linear space.
    """

    basis: RegressionBasis | None = None
    adjoint: str = "regression"
    control_variate: bool = True
    anchor_basis: bool = True

    def __post_init__(self):
        if self.adjoint not in ("regression", "pathwise"):
            raise ValueError(f"unknown adjoint mode {self.adjoint!r}")


# --------------------------------------------------------------------------
# evaluation


@dataclass
class Evaluation:
    u: np.ndarray
    fwd: ForwardSolution
    cond: Conditioner
    J: float
    J_se: float
    pathwise: np.ndarray | None = None
    bsde: BSDESolution | None = None


def make_conditioner(opts: SolverOptions, fwd: ForwardSolution) -> Conditioner:
    if opts.basis is None or fwd.ens.is_deterministic:
        return Conditioner.identity()
    return Conditioner.regression(opts.basis, fwd.x, fwd.k)


def evaluate(prob: ControlProblem, u, ens: NoiseEnsemble, opts: SolverOptions = SolverOptions(),
             cond: Conditioner | None = None) -> Evaluation:
    """Forward solve and cost at ``u``; ``cond`` overrides the conditioner."""
    fwd = solve_forward(prob.ops, prob.coeffs, u, prob.gamma, prob.mu1, ens, prob.qcfg)
    if cond is None:
        cond = make_conditioner(opts, fwd)
    if prob.cost.depends_on_yz:
        bs = solve_bsde(prob.cost, fwd, prob.mu2, ens, cond, opts.control_variate)
        return Evaluation(fwd.u, fwd, cond, bs.J, bs.stderr, None, bs)
    pw = pathwise_cost(prob.cost, fwd, prob.mu2)
    se = float(np.std(pw) / np.sqrt(pw.size)) if pw.size > 1 else 0.0
    return Evaluation(fwd.u, fwd, cond, float(np.mean(pw)), se, pw, None)


def cost_value(prob, u, ens, opts: SolverOptions = SolverOptions(), cond: Conditioner | None = None) -> float:
    return evaluate(prob, u, ens, opts, cond).J


# --------------------------------------------------------------------------
# linearization along a candidate


@dataclass
class Linearization:
    # leading axis is P, or 1 for path-constant derivatives
    bx: np.ndarray    # (P, N, a, d, d)
    bv: np.ndarray    # (P, N, d, d1)
    sx: np.ndarray    # (P, N, a, d, m, d)
    sv: np.ndarray    # (P, N, d, m, d1)
    fx: np.ndarray    # (P, N, af, d)
    fy: np.ndarray    # (P, N)
    fz: np.ndarray    # (P, N, m)
    fv: np.ndarray    # (P, N, d1)
    y_next: np.ndarray  # (P, N) y_{n+1} used inside f
    z: np.ndarray       # (P, N, m)


def _path_constant(a: np.ndarray) -> bool:
    # broadcast views (zero stride) and single-path arrays carry no path dependence
    return a.shape[0] == 1 or a.strides[0] == 0


def _stack_paths(vals, P: int, tail: tuple) -> np.ndarray:
    """Stack per-node derivatives; the path axis collapses to 1 when every node is path-constant."""
    vals = [np.asarray(v, dtype=float) for v in vals]
    vals = [v.reshape((v.shape[0] if v.ndim > len(tail) else 1,) + tail) for v in vals]
    if all(_path_constant(v) for v in vals):
        return np.stack([v[:1] for v in vals], axis=1)
    return np.stack([np.broadcast_to(v, (P,) + tail) for v in vals], axis=1)


def linearize(prob: ControlProblem, ev: Evaluation) -> Linearization:
    fwd = ev.fwd
    N, P = fwd.N, fwd.n_paths
    c, f = prob.coeffs, prob.cost
    if ev.bsde is not None:
        yn, z = ev.bsde.y[:, 1:], ev.bsde.z
    else:
        yn, z = np.zeros((P, N)), np.zeros((P, N, prob.m))
    parts = {key: [] for key in ("bx", "bv", "sx", "sv", "fx", "fy", "fz", "fv")}
    shapes = {"bx": (c.lags.size, c.d, c.d), "bv": (c.d, c.d1), "sx": (c.lags.size, c.d, c.m, c.d),
              "sv": (c.d, c.m, c.d1), "fx": (f.lags.size, c.d), "fy": (), "fz": (prob.m,), "fv": (c.d1,)}
    for n in range(N):
        X = fwd.X(n, c.lags)
        Xf = fwd.X(n, f.lags)
        v = np.broadcast_to(fwd.V[:, n], (P, c.d1))
        parts["bx"].append(c.drift_dx(n, X, v))
        parts["bv"].append(c.drift_dv(n, X, v))
        parts["sx"].append(c.diffusion_dx(n, X, v))
        parts["sv"].append(c.diffusion_dv(n, X, v))
        args = (n, Xf, yn[:, n], z[:, n], v)
        parts["fx"].append(f.running_dx(*args))
        parts["fy"].append(f.running_dy(*args))
        parts["fz"].append(f.running_dz(*args))
        parts["fv"].append(f.running_dv(*args))
    arr = {key: _stack_paths(val, P, shapes[key]) for key, val in parts.items()}
    return Linearization(**arr, y_next=yn, z=z)


def _atomic(lags, ker, dt, k):
    # FiniteMeasure sorts its atoms; permute the kernel's atom axis to match
    lags = np.asarray(lags)
    if np.unique(lags).size != lags.size:
        raise ValueError("coefficient lags must be distinct")
    order = np.argsort(lags, kind="stable")
    nu = FiniteMeasure(lags[order], np.ones(lags.size), dt)
    return KernelRepresentation(nu, ker[:, :, order], k)


def path_kernels(prob: ControlProblem, lin: Linearization) -> dict:
    """Kernel representations of the state derivatives of b, sigma_j and f.

    Kernels vanish at node N, where no coefficient is evaluated.
    """
    g = prob.grid
    N, k, dt = g.n_steps, g.k, g.dt
    c = prob.coeffs
    kb = np.zeros((lin.bx.shape[0], N + 1) + lin.bx.shape[2:])
    kb[:, :N] = lin.bx
    out = {"b": _atomic(c.lags, kb, dt, k)}
    for j in range(prob.m):
        ks = np.zeros((lin.sx.shape[0], N + 1, c.lags.size, c.d, c.d))
        ks[:, :N] = lin.sx[:, :, :, :, j, :]
        out[f"sigma{j}"] = _atomic(c.lags, ks, dt, k)
    kf = np.zeros((lin.fx.shape[0], N + 1, prob.cost.lags.size, 1, c.d))
    kf[:, :N, :, 0, :] = lin.fx
    out["f"] = _atomic(prob.cost.lags, kf, dt, k)
    return out


class AdjointGenerator:
    """g(n, p_seg, q_seg) = rho*_b(pi) + rho*_sigma(q) - rho*_f(k), read on the future window."""

    def __init__(self, lags, bx, sx, sqrt_eig, forcing):
        self.lags = np.asarray(lags)
        self.bx = bx          # (P, N, a, d, d)
        self.sx = sx          # (P, N, a, d, m, d)
        self.sq = sqrt_eig
        self.forcing = forcing  # (P, N, d)
        self.N = bx.shape[1]

    def __call__(self, n, ps, qs):
        out = self.forcing[:, n].copy()
        for i, lag in enumerate(self.lags):
            src = n - int(lag)
            if src > self.N - 1:
                continue
            off = -int(lag)
            out += np.einsum("prc,pr->pc", self.bx[:, src, i], ps[:, off])
            out += np.einsum("prjc,prj,j->pc", self.sx[:, src, i], qs[:, off], self.sq)
        return out


@dataclass
class AdjointBundle:
    k: np.ndarray
    lin: Linearization
    problem: ABSEEProblem
    sol: BackwardSolution
    cond: Conditioner


def assemble_adjoint(prob: ControlProblem, ev: Evaluation, k: np.ndarray, lin: Linearization | None = None,
                     cond: Conditioner | None = None) -> ABSEEProblem:
    g = prob.grid
    N, kk, dt, d, m = g.n_steps, g.k, g.dt, prob.d, prob.m
    lin = lin or linearize(prob, ev)
    cond = cond or ev.cond
    fwd = ev.fwd
    P = fwd.n_paths
    sq = prob.qcfg.sqrt_eig
    M = np.transpose(prob.ops.A, (0, 2, 1))
    Nop = None
    if np.any(prob.ops.B):
        Nop = np.einsum("j,njab->njba", sq, prob.ops.B)
    # -rho*_f(k), path-wise
    kf = path_kernels(prob, lin)["f"]
    Q = np.zeros((P, N + 1, 1))
    Q[:, :N, 0] = np.broadcast_to(k[:, :N], (P, N))
    forcing = -apply_rho_star(kf, Q)[:, kk: kk + N]
    gen = AdjointGenerator(prob.coeffs.lags, lin.bx, lin.sx, sq, forcing)
    # running terminal from the terminal cost
    x1 = terminal_argument(fwd.x, prob.mu2, kk)
    hx = prob.cost.terminal_dx(x1)
    base = -np.broadcast_to(k[:, N:N + 1], (P, 1)) * hx
    nodes, dF, zeta = [], [], []
    for lag, w in zip(prob.mu2.lags, prob.mu2.weights):
        node = N + int(lag)
        if node < 1 or w == 0.0:
            continue
        nodes.append(node)
        dF.append(w)
        zeta.append(cond(node, base))
    term = None
    if nodes:
        term = RunningTerminal(np.array(nodes), np.array(dF), np.stack(zeta, axis=1))
    return ABSEEProblem(N=N, k=kk, dt=dt, d=d, m=m, M=M, Nop=Nop, generator=gen, terminal=term,
                        meta={"kind": "adjoint"})


def cost_adjoint(prob: ControlProblem, ev: Evaluation, lin: Linearization) -> np.ndarray:
    if not prob.cost.depends_on_yz:
        return np.full((ev.fwd.n_paths, prob.grid.n_steps + 1), -1.0)
    return solve_cost_adjoint_k(lin.fy, lin.fz, ev.fwd.ens)


def solve_adjoint(prob: ControlProblem, ev: Evaluation, opts: SolverOptions = SolverOptions()) -> AdjointBundle:
    lin = linearize(prob, ev)
    k = cost_adjoint(prob, ev, lin)
    cond = Conditioner.identity() if opts.adjoint == "pathwise" else ev.cond
    problem = assemble_adjoint(prob, ev, k, lin, cond)
    sol = solve_absee(problem, ev.fwd.ens, cond, opts.control_variate)
    return AdjointBundle(k, lin, problem, sol, cond)


# --------------------------------------------------------------------------
# Hamiltonian and gradient


def hamiltonian(b, sigma, f, p, q, k, sqrt_eig=None):
    """<b, p> + sum_j sqrt(lam_j) <sigma_j, q_j> - f k (arrays over paths)."""
    b, sigma, p, q = (np.atleast_2d(np.asarray(a, dtype=float)) for a in (b, sigma, p, q))
    if sigma.ndim == 2:
        sigma = sigma[..., None]
    if q.ndim == 2:
        q = q[..., None]
    sq = np.ones(sigma.shape[-1]) if sqrt_eig is None else np.asarray(sqrt_eig)
    return np.sum(b * p, axis=-1) + np.einsum("paj,paj,j->p", sigma, q, sq) - np.asarray(f) * np.asarray(k)


def hamiltonian_dv(bv, sv, fv, p, q, k, sqrt_eig=None):
    """d H / d v = bv^T p + sum_j sqrt(lam_j) sv_j^T q_j - k fv."""
    sq = np.ones(sv.shape[-2]) if sqrt_eig is None else np.asarray(sqrt_eig)
    return (np.einsum("...ac,...a->...c", bv, p) + np.einsum("...ajc,...aj,j->...c", sv, q, sq)
            - np.asarray(k)[..., None] * fv)


@dataclass
class GradientReport:
    G: np.ndarray          # (P, k+N+1, d1), zero on [-K, 0)
    dvH: np.ndarray        # (P, N, d1)
    residual: float
    fd_table: list = field(default_factory=list)


def l2_inner(a: np.ndarray, b: np.ndarray, k: int, N: int, dt: float) -> float:
    """Mean over paths of sum_{n=0}^{N-1} dt <a_n, b_n> on control arrays."""
    s = np.sum(a[:, k:k + N] * b[:, k:k + N], axis=(1, 2)) * dt
    return float(np.mean(np.broadcast_to(s, (max(np.shape(a)[0], np.shape(b)[0]),))))


def aggregate_gradient(dvH: np.ndarray, mu1: FiniteMeasure, cond: Conditioner, k: int) -> np.ndarray:
    """G_m = E_m[sum_i w_i dvH(m - s_i) 1[0 <= m - s_i <= N-1]] on control nodes."""
    P, N, d1 = dvH.shape
    G = np.zeros((P, k + N + 1, d1))
    raw = np.zeros((P, N + 1, d1))
    for lag, w in zip(mu1.lags, mu1.weights):
        off = -int(lag)
        if off < N:
            raw[:, : N - off] += w * dvH[:, off:]
    for m in range(N + 1):
        if np.any(raw[:, m]):
            G[:, k + m] = cond(m, raw[:, m])
    return G


def stationarity_residual(prob: ControlProblem, u: np.ndarray, G: np.ndarray) -> float:
    g = prob.grid
    if prob.constraint.kind == "none":
        r = G
    else:
        r = u - project_control(prob, u - G)
    return float(np.sqrt(max(l2_inner(r, r, g.k, g.n_steps, g.dt), 0.0)))


def project_control(prob: ControlProblem, u: np.ndarray) -> np.ndarray:
    out = np.array(u, dtype=float, copy=True)
    k = prob.grid.k
    out[:, k:] = prob.constraint.project(out[:, k:])
    return out


def gradient_from(prob: ControlProblem, ev: Evaluation, adj: AdjointBundle) -> GradientReport:
    lin = adj.lin
    N, k = prob.grid.n_steps, prob.grid.k
    pi = adj.sol.p_step
    q = adj.sol.q[:, :N]
    dvH = hamiltonian_dv(lin.bv, lin.sv, lin.fv, pi, q, adj.k[:, :N], prob.qcfg.sqrt_eig)
    G = aggregate_gradient(dvH, prob.mu1, ev.cond, k)
    return GradientReport(G, dvH, stationarity_residual(prob, ev.u, G))


def smp_gradient(prob: ControlProblem, u, ens: NoiseEnsemble, opts: SolverOptions = SolverOptions(),
                 cond: Conditioner | None = None):
    """Forward, backward and gradient at ``u``; returns (GradientReport, Evaluation, AdjointBundle)."""
    ev = evaluate(prob, u, ens, opts, cond)
    adj = solve_adjoint(prob, ev, opts)
    return gradient_from(prob, ev, adj), ev, adj


# --------------------------------------------------------------------------
# variational equations and gradient checks


@dataclass
class VariationalSolution:
    xhat: np.ndarray   # (P, k+N+1, d)
    yhat: np.ndarray   # (P, N+1)
    zhat: np.ndarray   # (P, N, m)

    @property
    def yhat0(self) -> float:
        return float(np.mean(self.yhat[:, 0]))


def solve_variational(prob: ControlProblem, ev: Evaluation, direction: np.ndarray,
                      lin: Linearization | None = None, opts: SolverOptions = SolverOptions()) -> VariationalSolution:
    g = prob.grid
    N, k, dt = g.n_steps, g.k, g.dt
    lin = lin or linearize(prob, ev)
    ens = ev.fwd.ens
    P, d, m = ev.fwd.n_paths, prob.d, prob.m
    sq = prob.qcfg.sqrt_eig
    dirn = np.asarray(direction, dtype=float)
    if dirn.ndim == 2:
        dirn = dirn[None]
    vhat = np.zeros((dirn.shape[0], N + 1, prob.d1))
    for lag, w in zip(prob.mu1.lags, prob.mu1.weights):
        vhat += w * dirn[:, k + lag: k + lag + N + 1]
    vhat = np.broadcast_to(vhat, (P, N + 1, prob.d1))
    S = prob.ops.implicit_factors(dt)
    xh = np.zeros((P, k + N + 1, d))
    lagb = prob.coeffs.lags + k
    for n in range(N):
        Xh = xh[:, n + lagb]
        rhs = xh[:, n + k] + dt * (np.einsum("pirc,pic->pr", lin.bx[:, n], Xh)
                                   + np.einsum("prc,pc->pr", lin.bv[:, n], vhat[:, n]))
        dWn = ens.dW[:, n] * sq
        if np.any(dWn):
            Gs = (np.einsum("pirjc,pic->prj", lin.sx[:, n], Xh)
                  + np.einsum("prjc,pc->prj", lin.sv[:, n], vhat[:, n])
                  + prob.ops.apply_B(n, xh[:, n + k]))
            rhs = rhs + np.einsum("prj,pj->pr", Gs, dWn)
        xh[:, n + k + 1] = rhs @ S[n + 1].T
    x1 = terminal_argument(ev.fwd.x, prob.mu2, k)
    x1h = terminal_argument(xh, prob.mu2, k)
    cond = ev.cond
    cv = opts.control_variate and not cond.is_identity
    yh = np.zeros((P, N + 1))
    zh = np.zeros((P, N, m))
    yh[:, N] = np.sum(prob.cost.terminal_dx(x1) * x1h, axis=1)
    lagf = prob.cost.lags + k
    for n in range(N - 1, -1, -1):
        y1 = yh[:, n + 1]
        dWn = ens.dW[:, n]
        if np.any(dWn):
            base = y1 - cond(n, y1) if cv else y1
            zh[:, n] = cond(n, base[:, None] * dWn / dt)
        lin_f = (np.einsum("pic,pic->p", lin.fx[:, n], xh[:, n + lagf]) + lin.fy[:, n] * y1
                 + np.sum(lin.fz[:, n] * zh[:, n], axis=1) + np.sum(lin.fv[:, n] * vhat[:, n], axis=1))
        yh[:, n] = cond(n, y1 + dt * lin_f)
    return VariationalSolution(xh, yh, zh)


@dataclass
class FDReport:
    rows: list            # (rho, fd, yhat0, pairing)
    yhat0: float
    pairing: float

    def max_rel_disagreement(self) -> float:
        out = 0.0
        for rho, fd, yh, pr in self.rows:
            scale = max(abs(fd), abs(yh), abs(pr), 1e-300)
            out = max(out, abs(fd - yh) / scale, abs(fd - pr) / scale, abs(yh - pr) / scale)
        return out


def fd_gradient_check(prob: ControlProblem, u_bar, u, rhos, ens: NoiseEnsemble,
                      opts: SolverOptions = SolverOptions(), scheme: str = "forward",
                      cond: Conditioner | None = None) -> FDReport:
    """Finite differences of J along u - u_bar vs yhat(0) vs <G, u - u_bar>.

    All perturbed objectives reuse the conditioner built at ``u_bar``.
    """
    u_bar = np.asarray(u_bar, dtype=float)
    direction = np.asarray(u, dtype=float) - u_bar
    rep, ev, adj = smp_gradient(prob, u_bar, ens, opts, cond)
    cond = ev.cond
    var = solve_variational(prob, ev, direction, adj.lin, opts)
    g = prob.grid
    pairing = l2_inner(rep.G, direction, g.k, g.n_steps, g.dt)
    rows = []
    for rho in rhos:
        if not np.any(direction):
            rows.append((float(rho), 0.0, var.yhat0, pairing))
            continue
        Jp = cost_value(prob, u_bar + rho * direction, ens, opts, cond)
        if scheme == "central":
            Jm = cost_value(prob, u_bar - rho * direction, ens, opts, cond)
            fd = (Jp - Jm) / (2 * rho)
        else:
            fd = (Jp - ev.J) / rho
        rows.append((float(rho), float(fd), var.yhat0, pairing))
    return FDReport(rows, var.yhat0, pairing)


def coordinate_fd_gradient(prob: ControlProblem, u, ens: NoiseEnsemble, h: float = 1e-4,
                           opts: SolverOptions = SolverOptions()) -> np.ndarray:
    """Central-difference dJ/du_m for every control node 0..N-1 (deterministic use)."""
    u = np.asarray(u, dtype=float)
    g = prob.grid
    out = np.zeros((g.n_steps, prob.d1))
    for m in range(g.n_steps):
        for c in range(prob.d1):
            e = np.zeros_like(u)
            e[:, g.k + m, c] = h
            out[m, c] = (cost_value(prob, u + e, ens, opts) - cost_value(prob, u - e, ens, opts)) / (2 * h)
    return out


# --------------------------------------------------------------------------
# optimization


class LineSearchError(RuntimeError):
    def __init__(self, msg, result=None):
        super().__init__(msg)
        self.result = result


@dataclass
class DescentResult:
    u: np.ndarray
    trace: list            # (iter, J, residual, step)
    converged: bool
    initial_residual: float
    evaluation: Evaluation | None = None
    gradient: GradientReport | None = None


def projected_gradient_descent(prob: ControlProblem, u0, ens: NoiseEnsemble,
                               opts: SolverOptions = SolverOptions(), step: float = 1.0,
                               max_iter: int = 200, tol: float = 1e-3, abs_tol: float = 0.0,
                               armijo: float = 1e-4, budget: int = 30, max_step: float = 1e3,
                               callback=None) -> DescentResult:
    """u <- Proj_U(u - eta G) with Armijo backtracking (halving) on the CRN objective.

    Stops when the stationarity residual is below ``tol`` times the initial
    residual (or below ``abs_tol``).
    """
    g = prob.grid
    u = project_control(prob, np.asarray(u0, dtype=float))
    rep, ev, adj = smp_gradient(prob, u, ens, opts)
    anchor = ev.cond if opts.anchor_basis else None
    r0 = rep.residual
    trace = [(0, ev.J, rep.residual, 0.0)]
    if r0 <= abs_tol or r0 == 0.0:
        return DescentResult(u, trace, True, r0, ev, rep)
    eta = step
    for it in range(1, max_iter + 1):
        accepted = False
        for _ in range(budget):
            u_new = project_control(prob, u - eta * rep.G)
            dlt = u_new - u
            ev_new = evaluate(prob, u_new, ens, opts, anchor)
            dec = armijo / eta * l2_inner(dlt, dlt, g.k, g.n_steps, g.dt)
            if ev_new.J <= ev.J - dec:
                accepted = True
                break
            eta *= 0.5
        if not accepted:
            res = DescentResult(u, trace, False, r0, ev, rep)
            raise LineSearchError(f"line search failed after {budget} halvings at iteration {it}", res)
        u = u_new
        adj = solve_adjoint(prob, ev_new, opts)
        rep = gradient_from(prob, ev_new, adj)
        ev = ev_new
        trace.append((it, ev.J, rep.residual, eta))
        if callback is not None:
            callback(it, ev, rep)
        if rep.residual <= max(tol * r0, abs_tol):
            return DescentResult(u, trace, True, r0, ev, rep)
        eta = min(2.0 * eta, max_step)
    return DescentResult(u, trace, False, r0, ev, rep)


# --------------------------------------------------------------------------
# sufficiency


@dataclass
class SufficiencyCertificate:
    h_convex: bool
    H_convex: bool
    k_terminal_nonpositive: bool
    empirical_ok: bool
    worst_gap: float
    n_perturbations: int
    details: dict = field(default_factory=dict)

    @property
    def all_pass(self) -> bool:
        return self.h_convex and self.H_convex and self.k_terminal_nonpositive and self.empirical_ok


def _midpoint_convex(fn, a, b, tol):
    mid = fn(0.5 * (a + b))
    return bool(np.all(mid <= 0.5 * (fn(a) + fn(b)) + tol * (1 + np.abs(mid))))


def sufficiency_certificate(prob: ControlProblem, u_bar, ens: NoiseEnsemble,
                            opts: SolverOptions = SolverOptions(), n_perturb: int = 100,
                            scale: float = 0.5, n_samples: int = 256, seed: int = 0,
                            cond: Conditioner | None = None) -> SufficiencyCertificate:
    rng = np.random.default_rng(seed)
    g = prob.grid
    N, k = g.n_steps, g.k
    rep, ev, adj = smp_gradient(prob, u_bar, ens, opts, cond)
    d, d1, m = prob.d, prob.d1, prob.m
    tol = 1e-10
    # (a) terminal cost
    xs = ev.fwd.x[:, k + N]
    s = 1.0 + np.std(xs)
    A = xs[rng.integers(0, xs.shape[0], n_samples)] + s * rng.standard_normal((n_samples, d))
    B = xs[rng.integers(0, xs.shape[0], n_samples)] + s * rng.standard_normal((n_samples, d))
    h_ok = _midpoint_convex(prob.cost.terminal, A, B, tol)
    # (b) Hamiltonian, jointly in (X, y, z, v) with (pi, q, k) frozen
    c, f = prob.coeffs, prob.cost
    sq = prob.qcfg.sqrt_eig
    H_ok = True
    lags = np.union1d(c.lags, f.lags)
    P = ev.fwd.n_paths
    for n in rng.integers(0, N, size=min(N, 16)):
        idx = rng.integers(0, P, n_samples)
        pi = np.broadcast_to(adj.sol.p_step[:, n], (P, d))[idx]
        qn = adj.sol.q[idx, n] if adj.sol.q.shape[0] == P else np.broadcast_to(adj.sol.q[:, n], (n_samples, d, m))
        kn = np.broadcast_to(adj.k[:, n], (P,))[idx]

        def Hfun(Z, n=n, pi=pi, qn=qn, kn=kn):
            a_all = lags.size
            X = Z[:, : a_all * d].reshape(-1, a_all, d)
            y = Z[:, a_all * d]
            z = Z[:, a_all * d + 1: a_all * d + 1 + m]
            v = Z[:, a_all * d + 1 + m:]
            Xb = X[:, np.searchsorted(lags, c.lags)]
            Xf = X[:, np.searchsorted(lags, f.lags)]
            return hamiltonian(c.drift(n, Xb, v), c.diffusion(n, Xb, v), f.running(n, Xf, y, z, v), pi, qn, kn, sq)

        base = np.concatenate([ev.fwd.X(n, lags)[idx].reshape(n_samples, -1),
                               np.zeros((n_samples, 1 + m)),
                               np.broadcast_to(ev.fwd.V[:, n], (P, d1))[idx]], axis=1)
        Z1 = base + s * rng.standard_normal(base.shape)
        Z2 = base + s * rng.standard_normal(base.shape)
        H_ok &= _midpoint_convex(Hfun, Z1, Z2, 1e-9)
    # (c) cost adjoint at T
    k_ok = bool(np.all(adj.k[:, N] <= 0))
    # (d) empirical comparison under common random numbers
    ub = np.asarray(u_bar, dtype=float)
    worst = np.inf
    emp_ok = True
    base_pw = ev.pathwise
    usc = scale * (1.0 + float(np.sqrt(max(l2_inner(ub, ub, k, N, g.dt), 0.0))))
    t = np.linspace(0, 1, N + 1)[None, :, None]
    for i in range(n_perturb):
        # smooth random direction: a few Fourier modes per control coordinate
        a = rng.standard_normal((3, d1))
        dirn = a[0] + a[1] * np.sin(np.pi * t) + a[2] * np.cos(np.pi * t)
        eps = usc * rng.uniform(0.01, 1.0)
        u = ub.copy()
        u[:, k:] = u[:, k:] + eps * dirn / np.sqrt(np.mean(dirn**2))
        u = project_control(prob, u)
        ev_u = evaluate(prob, u, ens, opts, ev.cond)
        if base_pw is not None and ev_u.pathwise is not None and base_pw.size > 1:
            diff = ev_u.pathwise - base_pw
            se = float(np.std(diff) / np.sqrt(diff.size))
        else:
            se = ev_u.J_se
        gap = (ev_u.J - ev.J) + 3 * se
        worst = min(worst, gap)
        if gap < -1e-12 * max(1.0, abs(ev.J)):
            emp_ok = False
    return SufficiencyCertificate(h_ok, bool(H_ok), k_ok, emp_ok, float(worst), n_perturb)
