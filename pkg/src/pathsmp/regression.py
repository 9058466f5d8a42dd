"""Least-squares conditional expectations (per-node global regression)."""
from __future__ import annotations

from dataclasses import dataclass
from itertools import combinations_with_replacement

import numpy as np


class RegressionError(np.linalg.LinAlgError):
    pass


def _poly_columns(V: np.ndarray, degree: int) -> np.ndarray:
    # path-constant variables only add collinear monomials
    sd = V.std(axis=0)
    V = V[:, sd > 1e-12 * np.maximum(np.abs(V).max(axis=0), 1.0)]
    P, nv = V.shape
    cols = []
    for deg in range(1, degree + 1):
        for combo in combinations_with_replacement(range(nv), deg):
            cols.append(np.prod(V[:, list(combo)], axis=1))
    return np.stack(cols, axis=1) if cols else np.zeros((P, 0))


def condexp_regress(samples, features, ridge: float = 0.0, return_coef: bool = False):
    """Project ``samples`` (P, ...) onto ``span{1, features}`` path-wise.

    ``features`` is (P, B) without the intercept, which is always added and
    never penalized.  Columns with zero sample variance are dropped.
    """
    Y = np.asarray(samples, dtype=float)
    F = np.asarray(features, dtype=float).reshape(Y.shape[0], -1)
    proj = Projector.fit(F, ridge)
    fitted, coef = proj.apply(Y, return_coef=True)
    return (fitted, coef) if return_coef else fitted


@dataclass
class Projector:
    """Cached least-squares projector for one design matrix."""

    Qf: np.ndarray | None
    design: np.ndarray
    gram_inv: np.ndarray | None
    n_dropped: int

    @classmethod
    def fit(cls, F: np.ndarray, ridge: float = 0.0) -> "Projector":
        P = F.shape[0]
        if F.shape[1]:
            mu = F.mean(axis=0)
            sd = F.std(axis=0)
            scale = np.maximum(np.abs(mu), 1.0)
            keep = sd > 1e-10 * scale
            Fs = (F[:, keep] - mu[keep]) / sd[keep]
        else:
            keep = np.zeros(0, dtype=bool)
            Fs = F
        X = np.hstack([np.ones((P, 1)), Fs])
        B = X.shape[1]
        if P < B + 1 and ridge == 0.0:
            raise RegressionError(f"need at least {B + 1} paths for {B} basis functions; got {P}")
        if ridge > 0:
            pen = np.full(B, ridge * P)
            pen[0] = 0.0
            G = X.T @ X + np.diag(pen)
            return cls(None, X, np.linalg.inv(G), int((~keep).sum()))
        Qf, R = np.linalg.qr(X)
        diag = np.abs(np.diag(R))
        if diag.min() <= 1e-10 * diag.max():
            raise RegressionError(
                "rank-deficient regression design (collinear features); set a positive ridge"
            )
        return cls(Qf, X, None, int((~keep).sum()))

    def apply(self, Y: np.ndarray, return_coef: bool = False):
        shp = Y.shape
        Y2 = Y.reshape(shp[0], -1)
        if self.Qf is not None:
            c = self.Qf.T @ Y2
            fit = self.Qf @ c
        else:
            c = self.gram_inv @ (self.design.T @ Y2)
            fit = self.design @ c
        fit = fit.reshape(shp)
        return (fit, c) if return_coef else fit


@dataclass(frozen=True)
class RegressionBasis:
    """Polynomial features of x(t_n) and optionally x(t_n - K)."""

    degree: int = 1
    use_delay: bool = False
    ridge: float = 0.0

    def features(self, x: np.ndarray, n: int, k: int) -> np.ndarray:
        """``x`` is (P, k+N+1, d) on nodes -k..N; returns (P, B) at node n."""
        V = x[:, n + k]
        if self.use_delay and k > 0:
            V = np.hstack([V, x[:, n]])
        return _poly_columns(V, self.degree)


class Conditioner:
    """Realizes E[. | F_{t_n}] at every node.

    ``mode='identity'`` returns its argument (deterministic problems and the
    exact path-wise adjoint); ``mode='regression'`` projects onto the basis
    evaluated along the forward path ``x``.
    """

    def __init__(self, mode: str = "identity", basis: RegressionBasis | None = None,
                 x: np.ndarray | None = None, k: int = 0):
        if mode not in ("identity", "regression"):
            raise ValueError(f"unknown conditioner mode {mode!r}")
        if mode == "regression" and (basis is None or x is None):
            raise ValueError("regression mode needs a basis and a forward path")
        self.mode = mode
        self.basis = basis
        self.x = x
        self.k = k
        self._cache: dict[int, Projector] = {}

    @classmethod
    def identity(cls) -> "Conditioner":
        return cls("identity")

    @classmethod
    def regression(cls, basis: RegressionBasis, x: np.ndarray, k: int) -> "Conditioner":
        return cls("regression", basis, x, k)

    @property
    def is_identity(self) -> bool:
        return self.mode == "identity"

    def projector(self, n: int) -> Projector:
        pr = self._cache.get(n)
        if pr is None:
            F = self.basis.features(self.x, n, self.k)
            pr = Projector.fit(F, self.basis.ridge)
            self._cache[n] = pr
        return pr

    def __call__(self, n: int, Y: np.ndarray) -> np.ndarray:
        if self.mode == "identity":
            return Y
        Y = np.asarray(Y, dtype=float)
        if Y.shape[0] == 1:
            # path-constant data is already measurable
            return Y
        return self.projector(n).apply(Y)

    def coefficients(self, n: int, Y: np.ndarray) -> np.ndarray:
        if self.mode == "identity":
            return np.zeros(0)
        return self.projector(n).apply(np.asarray(Y, dtype=float), return_coef=True)[1]
