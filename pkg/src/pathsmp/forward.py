"""Drift-implicit Euler scheme for the delayed state equation.

Coefficients read the state at a finite set of node lags (the atoms of their
path derivative) and the delayed control ``v_n = sum_i w_i u(t_n + s_i)``.
One step of the scheme is

    (I - dt A_{n+1}) x_{n+1} = x_n + dt b_n + sum_j sqrt(lam_j) (B_{n,j} x_n + sigma_{n,j}) dW_{n,j}.
"""
from __future__ import annotations

import csv
import warnings
from dataclasses import dataclass, field

import numpy as np

from .measures import FiniteMeasure
from .spaces import GelfandTriple, NoiseEnsemble, OperatorPair, QWienerConfig


class NumericalError(FloatingPointError):
    pass


def _at(arr, n, base_ndim):
    return arr[n] if arr.ndim > base_ndim else arr


class CoefficientSet:
    """Drift ``b`` and diffusion ``sigma`` with their partial derivatives.

    ``X`` passed to every method has shape (P, a, d): ``X[:, i]`` is the state
    at node ``n + lags[i]``; ``v`` is (P, d1).  Diffusion values are (P, d, m).
    """

    lags: np.ndarray
    d: int
    m: int
    d1: int
    L1: float | None = None
    integrated_lipschitz_only: bool = False

    def drift(self, n, X, v):
        raise NotImplementedError

    def diffusion(self, n, X, v):
        raise NotImplementedError

    def drift_dx(self, n, X, v):
        """(P, a, d, d): d b / d X_i."""
        raise NotImplementedError

    def drift_dv(self, n, X, v):
        """(P, d, d1)."""
        raise NotImplementedError

    def diffusion_dx(self, n, X, v):
        """(P, a, d, m, d): d sigma[:, j] / d X_i."""
        raise NotImplementedError

    def diffusion_dv(self, n, X, v):
        """(P, d, m, d1)."""
        raise NotImplementedError

    @property
    def is_linear(self) -> bool:
        return False


class LinearDelayCoefficients(CoefficientSet):
    """b = sum_i A1_i X_i + C v + b0,  sigma_j = sum_i B1_{i,j} X_i + D_j v + s0_j.

    Matrices may carry a leading node axis (length N+1) for time dependence.
    """

    def __init__(self, lags, A1, C, B1=None, D=None, b0=None, s0=None, m: int = 1):
        self.lags = np.atleast_1d(np.asarray(lags, dtype=np.int64))
        a = self.lags.size
        self.A1 = np.asarray(A1, dtype=float)
        d = self.A1.shape[-1]
        if self.A1.shape[-3:] != (a, d, d):
            raise ValueError(f"A1 must end in shape ({a}, {d}, {d})")
        self.C = np.asarray(C, dtype=float)
        d1 = self.C.shape[-1]
        self.B1 = np.zeros((a, m, d, d)) if B1 is None else np.asarray(B1, dtype=float)
        m = self.B1.shape[-3]
        self.D = np.zeros((m, d, d1)) if D is None else np.asarray(D, dtype=float)
        self.b0 = np.zeros(d) if b0 is None else np.asarray(b0, dtype=float)
        self.s0 = np.zeros((d, m)) if s0 is None else np.asarray(s0, dtype=float)
        self.d, self.m, self.d1 = d, m, d1
        self.L1 = self._lipschitz()

    def _lipschitz(self):
        # (sum_i |A1_i|)^2 + sum_j (sum_i |B1_ij|)^2, worst node
        def worst(arr, base, f):
            if arr.ndim > base:
                return max(f(arr[n]) for n in range(arr.shape[0]))
            return f(arr)
        la = worst(self.A1, 3, lambda M: sum(np.linalg.norm(Mi, 2) for Mi in M) ** 2)
        lb = worst(self.B1, 4, lambda M: sum(
            sum(np.linalg.norm(M[i, j], 2) for i in range(M.shape[0])) ** 2 for j in range(M.shape[1])))
        return float(la + lb)

    @property
    def is_linear(self) -> bool:
        return True

    def drift(self, n, X, v):
        return (np.einsum("iab,pib->pa", _at(self.A1, n, 3), X)
                + v @ _at(self.C, n, 2).T + _at(self.b0, n, 1))

    def diffusion(self, n, X, v):
        return (np.einsum("ijab,pib->paj", _at(self.B1, n, 4), X)
                + np.einsum("jac,pc->paj", _at(self.D, n, 3), v) + _at(self.s0, n, 2))

    def drift_dx(self, n, X, v):
        return np.broadcast_to(_at(self.A1, n, 3), (X.shape[0],) + self.A1.shape[-3:])

    def drift_dv(self, n, X, v):
        return np.broadcast_to(_at(self.C, n, 2), (X.shape[0], self.d, self.d1))

    def diffusion_dx(self, n, X, v):
        B1 = _at(self.B1, n, 4)  # (a, m, d, d)
        return np.broadcast_to(B1.transpose(0, 2, 1, 3), (X.shape[0],) + B1.shape[:1] + (self.d, self.m, self.d))

    def diffusion_dv(self, n, X, v):
        D = _at(self.D, n, 3)  # (m, d, d1)
        return np.broadcast_to(D.transpose(1, 0, 2), (X.shape[0], self.d, self.m, self.d1))


class SineDelayCoefficients(CoefficientSet):
    """Scalar nonlinear delay system.

    b = a0 x(t) + c1 sin(x(t-K)) + cv v,  sigma = s0 + s1 x(t) + s2 sin(x(t-K)) + sv v.
    """

    def __init__(self, k: int, a0=0.0, c1=1.0, cv=1.0, s0=0.0, s1=0.0, s2=0.0, sv=0.0):
        self.lags = np.array([-k, 0], dtype=np.int64)
        self.a0, self.c1, self.cv = a0, c1, cv
        self.s0, self.s1, self.s2, self.sv = s0, s1, s2, sv
        self.d = self.m = self.d1 = 1
        self.L1 = float((abs(a0) + abs(c1)) ** 2 + (abs(s1) + abs(s2)) ** 2)

    def drift(self, n, X, v):
        return self.a0 * X[:, 1] + self.c1 * np.sin(X[:, 0]) + self.cv * v

    def diffusion(self, n, X, v):
        return (self.s0 + self.s1 * X[:, 1] + self.s2 * np.sin(X[:, 0]) + self.sv * v)[:, :, None]

    def drift_dx(self, n, X, v):
        out = np.zeros((X.shape[0], 2, 1, 1))
        out[:, 0, 0, 0] = self.c1 * np.cos(X[:, 0, 0])
        out[:, 1, 0, 0] = self.a0
        return out

    def drift_dv(self, n, X, v):
        return np.full((X.shape[0], 1, 1), self.cv)

    def diffusion_dx(self, n, X, v):
        out = np.zeros((X.shape[0], 2, 1, 1, 1))
        out[:, 0, 0, 0, 0] = self.s2 * np.cos(X[:, 0, 0])
        out[:, 1, 0, 0, 0] = self.s1
        return out

    def diffusion_dv(self, n, X, v):
        return np.full((X.shape[0], 1, 1, 1), self.sv)


class CallableCoefficients(CoefficientSet):
    """User callables; missing derivatives fall back to central differences."""

    def __init__(self, lags, d, m, d1, b, sigma, b_dx=None, b_dv=None, s_dx=None, s_dv=None,
                 L1=None, integrated_lipschitz_only=False, fd_step=1e-6):
        self.lags = np.atleast_1d(np.asarray(lags, dtype=np.int64))
        self.d, self.m, self.d1 = d, m, d1
        self._b, self._s = b, sigma
        self._bdx, self._bdv, self._sdx, self._sdv = b_dx, b_dv, s_dx, s_dv
        self.L1 = L1
        self.integrated_lipschitz_only = integrated_lipschitz_only
        self.h = fd_step

    def drift(self, n, X, v):
        return np.asarray(self._b(n, X, v), dtype=float).reshape(X.shape[0], self.d)

    def diffusion(self, n, X, v):
        return np.asarray(self._s(n, X, v), dtype=float).reshape(X.shape[0], self.d, self.m)

    def _fd_x(self, fn, n, X, v):
        P, a, d = X.shape
        base = fn(n, X, v)
        out = np.zeros((P, a) + base.shape[1:] + (d,))
        for i in range(a):
            for c in range(d):
                E = np.zeros_like(X)
                E[:, i, c] = self.h
                out[:, i, ..., c] = (fn(n, X + E, v) - fn(n, X - E, v)) / (2 * self.h)
        return out

    def _fd_v(self, fn, n, X, v):
        base = fn(n, X, v)
        out = np.zeros(base.shape + (self.d1,))
        for c in range(self.d1):
            E = np.zeros_like(v)
            E[:, c] = self.h
            out[..., c] = (fn(n, X, v + E) - fn(n, X, v - E)) / (2 * self.h)
        return out

    def drift_dx(self, n, X, v):
        return self._bdx(n, X, v) if self._bdx else self._fd_x(self.drift, n, X, v)

    def drift_dv(self, n, X, v):
        return self._bdv(n, X, v) if self._bdv else self._fd_v(self.drift, n, X, v)

    def diffusion_dx(self, n, X, v):
        return self._sdx(n, X, v) if self._sdx else self._fd_x(self.diffusion, n, X, v)

    def diffusion_dv(self, n, X, v):
        return self._sdv(n, X, v) if self._sdv else self._fd_v(self.diffusion, n, X, v)


@dataclass
class LipschitzReport:
    declared: float | None
    max_ratio: float
    finite_at_zero: bool
    ok: bool
    note: str = ""


def certify_lipschitz(coeffs: CoefficientSet, N: int, trials: int = 200, seed: int = 0,
                      scale: float = 2.0, qcfg: QWienerConfig | None = None) -> LipschitzReport:
    """Sampled check of ``|b - b'|^2 + |sigma - sigma'|^2 <= L1 sup |X - X'|^2``."""
    rng = np.random.default_rng(seed)
    a, d, d1 = coeffs.lags.size, coeffs.d, coeffs.d1
    lam = np.ones(coeffs.m) if qcfg is None else qcfg.eigenvalues
    X = scale * rng.standard_normal((trials, a, d))
    Xp = scale * rng.standard_normal((trials, a, d))
    v = scale * rng.standard_normal((trials, d1))
    worst = 0.0
    finite = True
    for n in range(0, N + 1, max(1, N // 8)):
        db = coeffs.drift(n, X, v) - coeffs.drift(n, Xp, v)
        ds = coeffs.diffusion(n, X, v) - coeffs.diffusion(n, Xp, v)
        num = np.sum(db**2, axis=1) + np.einsum("paj,paj,j->p", ds, ds, lam)
        den = np.max(np.sum((X - Xp) ** 2, axis=2), axis=1)
        worst = max(worst, float(np.max(num / den)))
        z = np.zeros((1, a, d))
        zv = np.zeros((1, d1))
        finite &= bool(np.all(np.isfinite(coeffs.drift(n, z, zv))) and np.all(np.isfinite(coeffs.diffusion(n, z, zv))))
    L1 = coeffs.L1
    if getattr(coeffs, "integrated_lipschitz_only", False):
        warnings.warn("coefficients declare only an integrated Lipschitz bound; "
                      "pointwise certificate skipped", RuntimeWarning, stacklevel=2)
        return LipschitzReport(L1, worst, finite, finite, "integrated bound only")
    ok = finite and (L1 is None or worst <= L1 * (1 + 1e-9))
    return LipschitzReport(L1, worst, finite, ok)


@dataclass
class ForwardSolution:
    x: np.ndarray            # (P, k+N+1, d) on nodes -k..N
    V: np.ndarray            # (Pu, N+1, d1) delayed controls v_n
    u: np.ndarray            # (Pu, k+N+1, d1)
    dt: float
    k: int
    ens: NoiseEnsemble
    method: str = "drift-implicit Euler"
    meta: dict = field(default_factory=dict)

    @property
    def N(self) -> int:
        return self.x.shape[1] - self.k - 1

    @property
    def n_paths(self) -> int:
        return self.x.shape[0]

    def X(self, n: int, lags) -> np.ndarray:
        return self.x[:, n + np.asarray(lags) + self.k]

    def to_csv(self, path) -> None:
        P, L, d = self.x.shape
        t = (np.arange(L) - self.k) * self.dt
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["path", "t"] + [f"coord_{i + 1}" for i in range(d)])
            for p in range(P):
                for j in range(L):
                    w.writerow([p, repr(float(t[j]))] + [repr(float(c)) for c in self.x[p, j]])


def delayed_control(u: np.ndarray, mu1: FiniteMeasure, k: int, N: int) -> np.ndarray:
    """v_n = sum_i w_i u(n + s_i) for n = 0..N; ``u`` is (Pu, k+N+1, d1)."""
    V = np.zeros((u.shape[0], N + 1, u.shape[2]))
    for lag, w in zip(mu1.lags, mu1.weights):
        V += w * u[:, k + lag: k + lag + N + 1]
    return V


def _as_paths(arr, nodes, last):
    a = np.asarray(arr, dtype=float)
    if a.ndim == 1:
        a = a.reshape(nodes, last)
    if a.ndim == 2:
        a = a[None]
    return a


def _as_gamma(gamma, d):
    g = np.asarray(gamma, dtype=float)
    if g.ndim == 1:
        return g.reshape(1, -1, d)
    return g[None] if g.ndim == 2 else g


def solve_forward(ops: OperatorPair, coeffs: CoefficientSet, u, gamma, mu1: FiniteMeasure,
                  ens: NoiseEnsemble, qcfg: QWienerConfig | None = None,
                  delay_source: np.ndarray | None = None, S: np.ndarray | None = None) -> ForwardSolution:
    """Simulate the state on nodes -k..N for every path of ``ens``.

    ``delay_source`` (P, k+N+1, d) freezes the arguments of b and sigma (the
    linear map whose fixed point is the solution); ``S`` are precomputed
    implicit factors.
    """
    N, dt = ens.n_steps, ens.dt
    d = coeffs.d
    gamma = _as_gamma(gamma, d)
    k = gamma.shape[1] - 1
    u = _as_paths(u, k + N + 1, coeffs.d1)
    if u.shape[1] != k + N + 1:
        raise ValueError(f"control must span {k + N + 1} nodes, got {u.shape[1]}")
    if ops.A.shape[0] != N + 1:
        raise ValueError("operator pair and ensemble disagree on the number of steps")
    if ens.n_modes != ops.m or coeffs.m != ops.m:
        raise ValueError(f"noise modes mismatch: ensemble {ens.n_modes}, B {ops.m}, sigma {coeffs.m}")
    if mu1.depth > k or (coeffs.lags.size and -coeffs.lags.min() > k):
        raise ValueError("delay atoms reach beyond the initial segment")
    qcfg = qcfg or QWienerConfig.cylindrical(ops.m)
    P = ens.n_paths
    if S is None:
        S = ops.implicit_factors(dt)
    V = delayed_control(u, mu1, k, N)
    x = np.empty((P, k + N + 1, d))
    x[:, : k + 1] = gamma
    src = x if delay_source is None else delay_source
    sq = qcfg.sqrt_eig
    lagidx = coeffs.lags + k
    has_B = bool(np.any(ops.B))
    for n in range(N):
        xn = x[:, n + k]
        X = src[:, n + lagidx]
        vn = np.broadcast_to(V[:, n], (P, coeffs.d1))
        rhs = xn + dt * coeffs.drift(n, X, vn)
        dWn = ens.dW[:, n] * sq
        if np.any(dWn):
            G = coeffs.diffusion(n, X, vn)
            if has_B:
                G = G + ops.apply_B(n, xn)
            rhs = rhs + np.einsum("paj,pj->pa", G, dWn)
        x[:, n + k + 1] = rhs @ S[n + 1].T
        bad = ~np.isfinite(x[:, n + k + 1]).all(axis=1)
        if bad.any():
            raise NumericalError(f"non-finite state on path {int(np.flatnonzero(bad)[0])} at step {n + 1}")
    return ForwardSolution(x, V, u, dt, k, ens)


def x_norm(diff: np.ndarray, k: int, dt: float, triple: GelfandTriple | None = None) -> float:
    """sqrt(sup_n E|.|_H^2) + sqrt(E sum_n dt |.|_V^2) over nodes 0..N."""
    body = diff[:, k:]
    sup = np.max(np.mean(np.sum(body**2, axis=2), axis=0))
    vw = np.ones(body.shape[2]) if triple is None else triple.v_weights
    l2 = np.mean(np.sum((body * vw) ** 2, axis=(1, 2))) * dt
    return float(np.sqrt(sup) + np.sqrt(l2))


@dataclass
class PicardResult:
    iterates: list
    ratios: list
    increments: list


def picard_iterate(ops, coeffs, u, gamma, mu1, ens, n_iter: int, qcfg=None,
                   triple: GelfandTriple | None = None) -> PicardResult:
    """Iterate the frozen-argument map from x0 = gamma(0) on [0, T]."""
    N = ens.n_steps
    d = coeffs.d
    g = _as_gamma(gamma, d)
    k = g.shape[1] - 1
    x0 = np.empty((ens.n_paths, k + N + 1, d))
    x0[:, : k + 1] = g
    x0[:, k + 1:] = g[:, -1:, :]
    S = ops.implicit_factors(ens.dt)
    its = [x0]
    incs, ratios = [], []
    n_big = 0
    for _ in range(n_iter):
        nxt = solve_forward(ops, coeffs, u, gamma, mu1, ens, qcfg, delay_source=its[-1], S=S).x
        incs.append(x_norm(nxt - its[-1], k, ens.dt, triple))
        its.append(nxt)
        if len(incs) >= 2:
            prev = incs[-2]
            r = 0.0 if incs[-1] == 0.0 else (incs[-1] / prev if prev > 0 else np.inf)
            ratios.append(r)
            n_big = n_big + 1 if r > 10 else 0
            if n_big >= 2:
                raise NumericalError("Picard iteration diverging; shorten the time window T")
    return PicardResult(its, ratios, incs)


@dataclass
class AprioriReport:
    lhs: float
    rhs_data: float
    consistent: bool

    @property
    def ratio(self) -> float:
        if self.rhs_data == 0.0:
            return 0.0 if self.lhs == 0.0 else np.inf
        return self.lhs / self.rhs_data


def apriori_diagnostic(sol: ForwardSolution, sol_p: ForwardSolution, coeffs: CoefficientSet,
                       coeffs_p: CoefficientSet, qcfg: QWienerConfig | None = None,
                       triple: GelfandTriple | None = None) -> AprioriReport:
    """Difference estimate for two solutions driven by the same noise.

    Data terms are evaluated along the primed solution.
    """
    if sol.ens is not sol_p.ens and not (
        sol.ens.dW.shape == sol_p.ens.dW.shape and np.array_equal(sol.ens.dW, sol_p.ens.dW)
    ):
        raise ValueError("a priori diagnostic needs both solutions on the same ensemble")
    k, dt, N = sol.k, sol.dt, sol.N
    lam = np.ones(coeffs.m) if qcfg is None else qcfg.eigenvalues
    diff = sol.x - sol_p.x
    body = diff[:, k:]
    vw = np.ones(body.shape[2]) if triple is None else triple.v_weights
    lhs = float(np.mean(np.max(np.sum(body**2, axis=2), axis=1))
                + np.mean(np.sum((body * vw) ** 2, axis=(1, 2))) * dt)
    g_diff = diff[:, : k + 1]
    rhs = float(np.mean(np.max(np.sum(g_diff**2, axis=2), axis=1)))
    P = sol.n_paths
    acc = np.zeros(P)
    for n in range(N):
        X = sol_p.X(n, coeffs.lags)
        Xp = sol_p.X(n, coeffs_p.lags)
        v = np.broadcast_to(sol.V[:, n], (P, coeffs.d1))
        vp = np.broadcast_to(sol_p.V[:, n], (P, coeffs.d1))
        db = coeffs.drift(n, X, v) - coeffs_p.drift(n, Xp, vp)
        ds = coeffs.diffusion(n, X, v) - coeffs_p.diffusion(n, Xp, vp)
        acc += (np.sum(db**2, axis=1) + np.einsum("paj,paj,j->p", ds, ds, lam)) * dt
    rhs += float(np.mean(acc))
    consistent = not (rhs == 0.0 and lhs > 1e-28)
    return AprioriReport(lhs, rhs, consistent)
