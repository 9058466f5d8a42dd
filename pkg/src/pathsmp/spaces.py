"""Time grids, truncated Gelfand triples, Q-Wiener noise and coercivity checks.

Everything lives on a uniform grid of step ``dt`` covering ``[-K, T + K]``.
Node ``n`` sits at time ``n * dt``; state paths are stored on nodes
``-k .. N`` and backward (adjoint) paths on nodes ``0 .. N + k`` where
``N = n_steps`` and ``k = K / dt``.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

_ALIGN_TOL = 1e-9


class GridError(ValueError):
    """Raised for grids whose delay horizon is not a multiple of the step."""


@dataclass(frozen=True)
class TimeGrid:
    T: float
    K: float
    n_steps: int
    dt: float
    k: int

    @property
    def N(self) -> int:
        return self.n_steps

    def nodes(self, span: str = "state") -> np.ndarray:
        """Node times for ``span`` in {'state', 'adjoint', 'full', 'control'}."""
        lo, hi = self.node_range(span)
        return np.arange(lo, hi + 1) * self.dt

    def node_range(self, span: str) -> tuple[int, int]:
        if span in ("state", "control"):
            return -self.k, self.n_steps
        if span == "adjoint":
            return 0, self.n_steps + self.k
        if span == "full":
            return -self.k, self.n_steps + self.k
        if span == "horizon":
            return 0, self.n_steps
        raise ValueError(f"unknown span {span!r}")

    def index(self, t: float) -> int:
        """Grid node of time ``t``; raises if ``t`` is not on the grid."""
        q = t / self.dt
        n = int(round(q))
        if abs(q - n) > _ALIGN_TOL * max(1.0, abs(q)):
            raise GridError(f"time {t} is not a grid node (dt={self.dt})")
        return n

    @property
    def n_state(self) -> int:
        return self.n_steps + self.k + 1


def build_grid(T: float, K: float, n_steps: int) -> TimeGrid:
    if not T > 0:
        raise GridError(f"T must be positive, got {T}")
    if K < 0:
        raise GridError(f"K must be nonnegative, got {K}")
    if n_steps < 1:
        raise GridError(f"n_steps must be >= 1, got {n_steps}")
    dt = T / n_steps
    q = K / dt
    k = int(round(q))
    if abs(q - k) > _ALIGN_TOL * max(1.0, q):
        raise GridError(
            f"K not grid-aligned: K/dt = {q:.6g} is not an integer "
            f"(T={T}, K={K}, n_steps={n_steps}); "
            f"try n_steps={_nearest_admissible(T, K, n_steps)}"
        )
    return TimeGrid(T=float(T), K=float(K), n_steps=int(n_steps), dt=dt, k=k)


def _nearest_admissible(T: float, K: float, n_steps: int) -> int | str:
    # K*n/T must be an integer; search outward from n_steps.
    for delta in range(0, 4 * n_steps + 1):
        for n in (n_steps + delta, n_steps - delta):
            if n >= 1:
                q = K * n / T
                if abs(q - round(q)) <= _ALIGN_TOL * max(1.0, q):
                    return n
    return "none nearby (K/T irrational?)"


@dataclass(frozen=True)
class GelfandTriple:
    """Coordinatewise Gelfand triple on R^d with V-weights ``rho_j >= 1``."""

    v_weights: np.ndarray

    def __post_init__(self):
        w = np.asarray(self.v_weights, dtype=float)
        if w.ndim != 1 or np.any(w < 1.0):
            raise ValueError("Gelfand weights must be a 1-d array with entries >= 1")
        object.__setattr__(self, "v_weights", w)

    @classmethod
    def flat(cls, d: int) -> "GelfandTriple":
        return cls(np.ones(d))

    @property
    def dim_H(self) -> int:
        return self.v_weights.size

    def norm_V(self, u):
        return np.sqrt(np.sum((self.v_weights * u) ** 2, axis=-1))

    def norm_H(self, u):
        return np.sqrt(np.sum(np.asarray(u) ** 2, axis=-1))

    def norm_star(self, u):
        return np.sqrt(np.sum((np.asarray(u) / self.v_weights) ** 2, axis=-1))


@dataclass(frozen=True)
class QWienerConfig:
    eigenvalues: np.ndarray

    def __post_init__(self):
        lam = np.atleast_1d(np.asarray(self.eigenvalues, dtype=float))
        if lam.ndim != 1 or lam.size < 1:
            raise ValueError("need at least one noise mode")
        if np.any(lam < 0):
            raise ValueError("Q eigenvalues must be nonnegative")
        object.__setattr__(self, "eigenvalues", lam)

    @classmethod
    def cylindrical(cls, m: int) -> "QWienerConfig":
        return cls(np.ones(m))

    @property
    def n_modes(self) -> int:
        return self.eigenvalues.size

    @property
    def sqrt_eig(self) -> np.ndarray:
        return np.sqrt(self.eigenvalues)

    def l20_norm_sq(self, F: np.ndarray) -> np.ndarray:
        """Squared L2^0 norm of ``F`` with columns F e_j (shape (..., d, m))."""
        return np.einsum("...ij,...ij,j->...", F, F, self.eigenvalues)


@dataclass(frozen=True)
class NoiseEnsemble:
    """Gaussian increments ``dW[path, step, mode] ~ N(0, dt)``.

    Draws for path ``p`` come from a Philox stream keyed by ``(seed, p)``, so
    ensembles of different sizes share their leading paths and any single
    ``(path, step, mode)`` draw is addressable by counter position.
    """

    dW: np.ndarray
    seed: int
    dt: float

    @property
    def n_paths(self) -> int:
        return self.dW.shape[0]

    @property
    def n_steps(self) -> int:
        return self.dW.shape[1]

    @property
    def n_modes(self) -> int:
        return self.dW.shape[2]

    @property
    def is_deterministic(self) -> bool:
        return not np.any(self.dW)

    @classmethod
    def zeros(cls, grid: TimeGrid, n_modes: int = 1, n_paths: int = 1) -> "NoiseEnsemble":
        return cls(np.zeros((n_paths, grid.n_steps, n_modes)), seed=0, dt=grid.dt)

    def coarsen(self, factor: int) -> "NoiseEnsemble":
        """Sum blocks of ``factor`` consecutive increments (same Brownian paths)."""
        P, n, m = self.dW.shape
        if n % factor:
            raise ValueError(f"{n} steps not divisible by {factor}")
        dW = self.dW.reshape(P, n // factor, factor, m).sum(axis=2)
        return NoiseEnsemble(dW, self.seed, self.dt * factor)

    def scrambled_after(self, step: int, seed: int) -> "NoiseEnsemble":
        """Copy with increments at steps >= ``step`` redrawn (adaptedness tests)."""
        rng = np.random.default_rng(seed)
        dW = self.dW.copy()
        dW[:, step:, :] = rng.standard_normal(dW[:, step:, :].shape) * np.sqrt(self.dt)
        return NoiseEnsemble(dW, self.seed, self.dt)


def _path_stream(seed: int, path: int) -> np.random.Generator:
    key = ((int(seed) & (2**64 - 1)) << 64) | int(path)
    return np.random.Generator(np.random.Philox(key=key))


def sample_noise(cfg: QWienerConfig, grid: TimeGrid, n_paths: int, seed: int) -> NoiseEnsemble:
    if n_paths < 1:
        raise ValueError("n_paths must be >= 1")
    m, n = cfg.n_modes, grid.n_steps
    dW = np.empty((n_paths, n, m))
    scale = np.sqrt(grid.dt)
    for p in range(n_paths):
        dW[p] = _path_stream(seed, p).standard_normal((n, m)) * scale
    return NoiseEnsemble(dW, int(seed), grid.dt)


def ito_integral(integrand: np.ndarray, ens: NoiseEnsemble, cfg: QWienerConfig) -> np.ndarray:
    """Left-point sums of ``f(t_n) Q^{1/2} dW_n``.

    ``integrand`` has shape (P or 1, n_steps, d, m); returns the running
    integral on nodes 0..N with shape (P, N + 1, d).
    """
    f = np.asarray(integrand, dtype=float)
    if f.ndim != 4 or f.shape[1] != ens.n_steps or f.shape[3] != ens.n_modes:
        raise ValueError(
            f"integrand shape {f.shape} incompatible with ensemble "
            f"(steps={ens.n_steps}, modes={ens.n_modes})"
        )
    incr = np.einsum("pndj,pnj,j->pnd", np.broadcast_to(f, (ens.n_paths,) + f.shape[1:]),
                     ens.dW, cfg.sqrt_eig)
    out = np.zeros((ens.n_paths, ens.n_steps + 1, f.shape[2]))
    np.cumsum(incr, axis=1, out=out[:, 1:])
    return out


def ito_isometry_gap(integrand: np.ndarray, ens: NoiseEnsemble, cfg: QWienerConfig) -> tuple[float, float]:
    """Return (E|int f dw|^2, E int |f|_{L2^0}^2 dt) at the final time."""
    I = ito_integral(integrand, ens, cfg)[:, -1]
    lhs = float(np.mean(np.sum(I**2, axis=-1)))
    f = np.broadcast_to(integrand, (ens.n_paths,) + integrand.shape[1:])
    rhs = float(np.mean(np.sum(cfg.l20_norm_sq(f), axis=1)) * ens.dt)
    return lhs, rhs


@dataclass(frozen=True)
class OperatorPair:
    """Time-indexed linear operators ``A(t_n)`` (d x d) and ``B(t_n)``.

    ``B`` has shape (N + 1, m, d, d): column j of ``B(t) u`` is ``B[n, j] @ u``.
    """

    A: np.ndarray
    B: np.ndarray
    alpha: float = 0.0
    lam: float = 0.0
    K1: float = np.inf

    def __post_init__(self):
        A = np.asarray(self.A, dtype=float)
        B = np.asarray(self.B, dtype=float)
        if A.ndim != 3 or A.shape[1] != A.shape[2]:
            raise ValueError("A must have shape (N+1, d, d)")
        if B.ndim != 4 or B.shape[0] != A.shape[0] or B.shape[2:] != A.shape[1:]:
            raise ValueError("B must have shape (N+1, m, d, d)")
        object.__setattr__(self, "A", A)
        object.__setattr__(self, "B", B)

    @classmethod
    def constant(cls, grid: TimeGrid, A, B=None, m: int = 1, **kw) -> "OperatorPair":
        A = np.atleast_2d(np.asarray(A, dtype=float))
        d = A.shape[0]
        if B is None:
            B = np.zeros((m, d, d))
        B = np.asarray(B, dtype=float).reshape(-1, d, d)
        n = grid.n_steps + 1
        return cls(np.broadcast_to(A, (n, d, d)).copy(), np.broadcast_to(B, (n,) + B.shape).copy(), **kw)

    @property
    def d(self) -> int:
        return self.A.shape[1]

    @property
    def m(self) -> int:
        return self.B.shape[1]

    def apply_B(self, n: int, x: np.ndarray) -> np.ndarray:
        """B(t_n) x for x of shape (P, d); returns (P, d, m)."""
        return np.einsum("jab,pb->paj", self.B[n], x)

    def implicit_factors(self, dt: float) -> np.ndarray:
        """Inverses of ``I - dt A(t_n)`` for every node; fails fast if singular."""
        d = self.d
        M = np.eye(d)[None] - dt * self.A
        cond = np.linalg.cond(M)
        bad = np.flatnonzero(~np.isfinite(cond) | (cond > 1e12))
        if bad.size:
            raise np.linalg.LinAlgError(
                f"I - dt*A(t_n) is singular at node {bad[0]} (dt={dt}); reduce the step size"
            )
        return np.linalg.inv(M)


@dataclass
class CoercivityReport:
    max_violation: float
    n_checked: int
    worst_node: int | None
    max_bound_ratio: float
    violations: list = field(default_factory=list)

    @property
    def ok(self) -> bool:
        return self.max_violation <= 1e-10 * max(1.0, self.n_checked and 1.0)


def check_coercivity(
    ops: OperatorPair,
    triple: GelfandTriple,
    trials: int = 16,
    cfg: QWienerConfig | None = None,
    seed: int = 0,
) -> CoercivityReport:
    """Evaluate ``2<Au,u> + |Bu|^2 + alpha|u|_V^2 - lambda|u|_H^2`` on test vectors.

    Test vectors are the canonical basis plus ``trials`` random unit vectors;
    every node is checked.  Positive values are violations.  The ratio
    ``|Au|_* / |u|_V`` is also tracked against the declared ``K1``.
    """
    if trials < 1:
        raise ValueError("trials must be >= 1")
    d = ops.d
    lam_q = np.ones(ops.m) if cfg is None else cfg.eigenvalues
    rng = np.random.default_rng(seed)
    R = rng.standard_normal((trials, d))
    R /= np.linalg.norm(R, axis=1, keepdims=True)
    U = np.vstack([np.eye(d), R])
    AU = np.einsum("nab,ub->nua", ops.A, U)
    BU = np.einsum("njab,ub->nuaj", ops.B, U)
    lhs = 2 * np.einsum("nua,ua->nu", AU, U) + np.einsum("nuaj,nuaj,j->nu", BU, BU, lam_q)
    excess = lhs + ops.alpha * triple.norm_V(U) ** 2 - ops.lam * triple.norm_H(U) ** 2
    scale = triple.norm_V(U) ** 2
    rel = excess / scale
    worst = np.unravel_index(np.argmax(rel), rel.shape)
    bound = triple.norm_star(AU) / triple.norm_V(U)
    viol = [(int(n), int(u), float(rel[n, u])) for n, u in zip(*np.nonzero(rel > 1e-12))]
    return CoercivityReport(
        max_violation=float(max(rel.max(), 0.0)),
        n_checked=int(rel.size),
        worst_node=int(worst[0]) if rel.max() > 1e-12 else None,
        max_bound_ratio=float(bound.max()),
        violations=viol,
    )
