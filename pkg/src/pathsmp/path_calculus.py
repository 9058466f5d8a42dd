"""Path-derivative operators with atomic representing measures.

A :class:`KernelRepresentation` stores ``k(t_n, s_i)`` for every node ``n`` in
``0..N`` and every atom ``s_i`` of ``nu0``.  On the grid

    rho_n(Z)   = sum_i w_i k(n, s_i) Z(n + s_i)
    rho*_u(Q)  = sum_i w_i k(u - s_i, s_i)^T Q(u - s_i) 1[0 <= u - s_i <= N]

and both sides of the duality are weighted by ``dt``, so the discrete adjoint
is the exact transpose of the discrete forward map.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import kernels
from .measures import FiniteMeasure, stopped_segment, StatePath


@dataclass(frozen=True)
class KernelRepresentation:
    """``kernel`` has shape (Pk, N+1, a, dF, dE) with Pk = 1 or n_paths."""

    nu0: FiniteMeasure
    kernel: np.ndarray
    k: int

    def __post_init__(self):
        ker = np.asarray(self.kernel, dtype=float)
        if ker.ndim == 4:
            ker = ker[None]
        if ker.ndim != 5 or ker.shape[2] != self.nu0.n_atoms:
            raise ValueError(
                f"kernel shape {ker.shape} does not match (Pk, N+1, {self.nu0.n_atoms}, dF, dE)"
            )
        if self.nu0.depth > self.k:
            raise ValueError("nu0 reaches further back than the grid delay horizon")
        object.__setattr__(self, "kernel", np.ascontiguousarray(ker))

    @property
    def N(self) -> int:
        return self.kernel.shape[1] - 1

    @property
    def dF(self) -> int:
        return self.kernel.shape[3]

    @property
    def dE(self) -> int:
        return self.kernel.shape[4]

    @property
    def dt(self) -> float:
        return self.nu0.dt

    def scaled_measure(self, c: float) -> "KernelRepresentation":
        return KernelRepresentation(self.nu0.scaled(c), self.kernel, self.k)


@dataclass(frozen=True)
class BoundConstants:
    M0: float
    M: float
    max_rho_ratio: float = float("nan")
    max_rho_star_ratio: float = float("nan")

    @property
    def product(self) -> float:
        return self.M0 * self.M


def _batched(a: np.ndarray):
    a = np.asarray(a, dtype=float)
    return (a[None], True) if a.ndim == 2 else (a, False)


def apply_rho(rep: KernelRepresentation, Z: np.ndarray, impl=None) -> np.ndarray:
    """Z on nodes -k..N (shape (P, k+N+1, dE) or unbatched); returns nodes 0..N."""
    Zb, squeeze = _batched(Z)
    if Zb.shape[1] != rep.k + rep.N + 1:
        raise ValueError(f"Z must span {rep.k + rep.N + 1} nodes, got {Zb.shape[1]}")
    out = kernels.rho_apply(rep.kernel, rep.nu0.lags, rep.nu0.weights, Zb, rep.k, impl=impl)
    return out[0] if squeeze else out


def apply_rho_star(rep: KernelRepresentation, Q: np.ndarray, impl=None) -> np.ndarray:
    """Transpose of :func:`apply_rho`; Q on nodes 0..N, result on -k..N."""
    Qb, squeeze = _batched(Q)
    if Qb.shape[1] != rep.N + 1:
        raise ValueError(f"Q must span {rep.N + 1} nodes, got {Qb.shape[1]}")
    out = kernels.rho_star_scatter(rep.kernel, rep.nu0.lags, rep.nu0.weights, Qb, rep.k, impl=impl)
    return out[0] if squeeze else out


def apply_rho_star_formula(rep: KernelRepresentation, Q: np.ndarray, impl=None) -> np.ndarray:
    """Direct quadrature of the adjoint formula (gather per output node)."""
    Qb, squeeze = _batched(Q)
    out = kernels.rho_star_gather(rep.kernel, rep.nu0.lags, rep.nu0.weights, Qb, rep.k, impl=impl)
    return out[0] if squeeze else out


@dataclass(frozen=True)
class DualityReport:
    lhs: float
    rhs: float

    @property
    def residual(self) -> float:
        return abs(self.lhs - self.rhs)

    @property
    def relative(self) -> float:
        scale = max(abs(self.lhs), abs(self.rhs))
        return self.residual / scale if scale > 0 else self.residual


def duality_residual(rep: KernelRepresentation, Z: np.ndarray, Q: np.ndarray) -> DualityReport:
    dt = rep.dt
    lhs = float(np.sum(apply_rho(rep, Z) * Q) * dt)
    rhs = float(np.sum(np.asarray(Z) * apply_rho_star(rep, Q)) * dt)
    return DualityReport(lhs, rhs)


def change_of_variables_check(g, nu0: FiniteMeasure, Kp: int, N: int, k: int) -> tuple[float, float]:
    """Both sides of the reindexing identity for ``g`` on (node 0..N, atom).

    ``g`` is an array of shape (N+1, a) or a callable ``g(n, i)``; ``Kp`` is a
    node in ``[-k, N]``.
    """
    a = nu0.n_atoms
    if callable(g):
        G = np.array([[g(n, i) for i in range(a)] for n in range(N + 1)], dtype=float).reshape(N + 1, a)
    else:
        G = np.asarray(g, dtype=float)
    dt, lags, w = nu0.dt, nu0.lags, nu0.weights
    t = np.arange(N + 1)[:, None]
    lhs_mask = lags[None, :] >= Kp - t
    lhs = float(np.sum(G * w[None, :] * lhs_mask) * dt)
    u = np.arange(-k, N + 1)[:, None]
    src = u - lags[None, :]
    ok = (src >= 0) & (src <= N) & (u >= Kp)
    vals = np.where(ok, G[np.clip(src, 0, N), np.arange(a)[None, :]], 0.0)
    rhs = float(np.sum(vals * w[None, :]) * dt)
    return lhs, rhs


def _opnorms(rep: KernelRepresentation) -> np.ndarray:
    # spectral norm per (path, node, atom)
    return np.linalg.norm(rep.kernel, ord=2, axis=(-2, -1))


def compute_bounds(rep: KernelRepresentation, n_samples: int = 0, seed: int = 0) -> BoundConstants:
    """M0 and the shifted bound M; optionally the sampled operator-norm ratios."""
    nrm = _opnorms(rep) * rep.nu0.weights  # (Pk, N+1, a)
    M0 = float(nrm.sum(axis=2).max()) if nrm.size else 0.0
    N, k = rep.N, rep.k
    u = np.arange(-k, N + 1)[:, None]
    src = u - rep.nu0.lags[None, :]
    ok = (src >= 0) & (src <= N)
    if nrm.size:
        shifted = np.where(ok[None], nrm[:, np.clip(src, 0, N), np.arange(rep.nu0.n_atoms)[None, :]], 0.0)
        M = float(shifted.sum(axis=2).max())
    else:
        M = 0.0
    if n_samples <= 0:
        return BoundConstants(M0, M)
    rng = np.random.default_rng(seed)
    P = rep.kernel.shape[0]
    r1 = r2 = 0.0
    for _ in range(n_samples):
        Z = rng.standard_normal((P, k + N + 1, rep.dE))
        Q = rng.standard_normal((P, N + 1, rep.dF))
        Tp = int(rng.integers(0, N + 1))
        Kp = int(rng.integers(-k, N + 1))
        rz = apply_rho(rep, Z)
        num = np.sum(rz[:, : Tp + 1] ** 2)
        den = np.sum(Z[:, : k + Tp + 1] ** 2)
        r1 = max(r1, num / den)
        rq = apply_rho_star(rep, Q)
        num = np.sum(rq[:, Kp + k:] ** 2)
        den = np.sum(Q[:, max(0, Kp):] ** 2)
        if den > 0:
            r2 = max(r2, num / den)
    return BoundConstants(M0, M, float(r1), float(r2))


def integral_delay_kernel(derivative_at, mu: FiniteMeasure, N: int, k: int) -> KernelRepresentation:
    """s-independent kernel ``k(t, s) = derivative_at(t)`` against ``nu0 = mu``.

    ``derivative_at`` is an array (N+1, dF, dE), (P, N+1, dF, dE), or a callable
    of the node index returning a (dF, dE) matrix.
    """
    if callable(derivative_at):
        D = np.array([np.atleast_2d(derivative_at(n)) for n in range(N + 1)], dtype=float)
    else:
        D = np.asarray(derivative_at, dtype=float)
    if D.ndim == 3:
        D = D[None]
    ker = np.broadcast_to(D[:, :, None], D.shape[:2] + (mu.n_atoms,) + D.shape[2:])
    return KernelRepresentation(mu, np.ascontiguousarray(ker), k)


def rho_nonanticipative_gap(rep: KernelRepresentation, Z: np.ndarray, n: int) -> float:
    """|rho_n(Z) - rho_n(Z stopped at [n-k, n])|; zero for non-anticipative rho."""
    Zb, _ = _batched(Z)
    seg = stopped_segment(StatePath(Zb, -rep.k, rep.dt), n * rep.dt, rep.k * rep.dt).values
    return float(np.max(np.abs(apply_rho(rep, Zb)[:, n] - apply_rho(rep, seg)[:, n])))


def rho_star_anticipative_gap(rep: KernelRepresentation, Q: np.ndarray, u: int) -> float:
    """|rho*_u(Q) - rho*_u(Q frozen outside [u, (u+k) ^ N])|."""
    Qb, _ = _batched(Q)
    N, k = rep.N, rep.k
    lo, hi = max(u, 0), min(u + k, N)
    if lo > hi:
        frozen = np.zeros_like(Qb)
    else:
        idx = np.clip(np.arange(N + 1), lo, hi)
        frozen = Qb[:, idx]
    full = apply_rho_star(rep, Qb)[:, u + k]
    part = apply_rho_star(rep, frozen)[:, u + k]
    return float(np.max(np.abs(full - part)))
