"""Atomic delay measures, state paths, stopped segments and path shifts."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

_SNAP_TOL = 1e-9


class SpanError(IndexError):
    pass


@dataclass(frozen=True)
class FiniteMeasure:
    """Nonnegative atomic measure on ``[-K, 0]`` with grid-aligned atoms.

    ``lags`` are integer node offsets (``<= 0``), ``weights`` the atom masses.
    """

    lags: np.ndarray
    weights: np.ndarray
    dt: float

    def __post_init__(self):
        lags = np.atleast_1d(np.asarray(self.lags)).astype(np.int64)
        w = np.atleast_1d(np.asarray(self.weights, dtype=float))
        if lags.shape != w.shape or lags.ndim != 1:
            raise ValueError("lags and weights must be 1-d arrays of equal length")
        if np.any(lags > 0):
            raise ValueError("atoms must lie in [-K, 0]")
        if np.any(~np.isfinite(w)) or np.any(w < 0):
            raise ValueError("FiniteMeasure weights must be nonnegative (signed measures unsupported)")
        order = np.argsort(lags, kind="stable")
        lags, w = lags[order], w[order]
        if lags.size and np.any(np.diff(lags) == 0):
            # merge duplicate atoms
            uniq, inv = np.unique(lags, return_inverse=True)
            w = np.bincount(inv, weights=w, minlength=uniq.size)
            lags = uniq
        object.__setattr__(self, "lags", lags)
        object.__setattr__(self, "weights", w)

    @property
    def atoms(self) -> np.ndarray:
        return self.lags * self.dt

    @property
    def total_mass(self) -> float:
        return float(self.weights.sum())

    @property
    def n_atoms(self) -> int:
        return self.lags.size

    @property
    def depth(self) -> int:
        """Largest lag in nodes (0 for an empty measure)."""
        return int(-self.lags.min()) if self.lags.size else 0

    def scaled(self, c: float) -> "FiniteMeasure":
        return FiniteMeasure(self.lags, c * self.weights, self.dt)

    def pairs(self) -> list[tuple[float, float]]:
        return [(float(s), float(w)) for s, w in zip(self.atoms, self.weights)]

    # presets -------------------------------------------------------------
    @classmethod
    def zero(cls, dt: float) -> "FiniteMeasure":
        return cls(np.zeros(0, dtype=np.int64), np.zeros(0), dt)

    @classmethod
    def dirac(cls, offset: float, dt: float, weight: float = 1.0) -> "FiniteMeasure":
        m, _ = cls.from_pairs([(offset, weight)], dt)
        return m

    @classmethod
    def trapezoid(cls, K: float, dt: float) -> "FiniteMeasure":
        """Lebesgue measure on [-K, 0] as the (k+1)-node trapezoid rule."""
        k = int(round(K / dt))
        if k == 0:
            return cls.zero(dt)
        w = np.full(k + 1, dt)
        w[0] = w[-1] = 0.5 * dt
        return cls(-np.arange(k, -1, -1), w, dt)

    @classmethod
    def from_pairs(cls, pairs, dt: float, K: float | None = None) -> tuple["FiniteMeasure", float]:
        """Snap ``(offset, weight)`` pairs onto the grid.

        Offsets go to the nearest node, ties toward 0.  Returns the measure and
        the largest snap distance.
        """
        pairs = list(pairs)
        if not pairs:
            return cls.zero(dt), 0.0
        s = np.array([float(p[0]) for p in pairs])
        w = np.array([float(p[1]) for p in pairs])
        if np.any(w < 0):
            bad = int(np.flatnonzero(w < 0)[0])
            raise ValueError(f"FiniteMeasure weights must be nonnegative; atom {bad} has weight {w[bad]}")
        if np.any(s > _SNAP_TOL * dt):
            raise ValueError("atoms must lie in [-K, 0]")
        if K is not None and np.any(s < -K - 0.5 * dt):
            raise ValueError(f"atom below -K={-K}")
        q = s / dt
        lo = np.floor(q)
        frac = q - lo
        # tie (frac == 1/2) rounds toward 0, i.e. up for negative offsets
        lags = np.where(frac >= 0.5 - _SNAP_TOL, lo + 1, lo).astype(np.int64)
        lags = np.minimum(lags, 0)
        if K is not None:
            lags = np.maximum(lags, -int(round(K / dt)))
        snap = float(np.max(np.abs(lags * dt - s)))
        return cls(lags, w, dt), snap


@dataclass(frozen=True)
class StatePath:
    """Node values ``values[..., j, :]`` at node ``start + j`` (time ``(start+j)*dt``)."""

    values: np.ndarray
    start: int
    dt: float

    @property
    def stop(self) -> int:
        return self.start + self.values.shape[-2] - 1

    def times(self) -> np.ndarray:
        return np.arange(self.start, self.stop + 1) * self.dt

    def node(self, t: float) -> int:
        q = t / self.dt
        n = int(round(q))
        if abs(q - n) > 1e-9 * max(1.0, abs(q)):
            raise ValueError(f"time {t} is not a grid node")
        return n

    def at(self, n: int) -> np.ndarray:
        if not self.start <= n <= self.stop:
            raise SpanError(f"node {n} outside path span [{self.start}, {self.stop}]")
        return self.values[..., n - self.start, :]

    @classmethod
    def from_function(cls, fn, start: int, stop: int, dt: float) -> "StatePath":
        t = np.arange(start, stop + 1) * dt
        vals = np.array([np.atleast_1d(fn(s)) for s in t], dtype=float)
        return cls(vals, start, dt)


def delay_integral(path: StatePath, mu: FiniteMeasure, t: float) -> np.ndarray:
    """``sum_i w_i path(t + s_i)``."""
    n = path.node(t)
    out = np.zeros(path.values.shape[:-2] + path.values.shape[-1:])
    for lag, w in zip(mu.lags, mu.weights):
        m = n + lag
        if not path.start <= m <= path.stop:
            raise SpanError(
                f"atom s={lag * mu.dt:g} reads node {m} outside path span [{path.start}, {path.stop}]"
            )
        out = out + w * path.values[..., m - path.start, :]
    return out


def stopped_segment(path: StatePath, t: float, K: float) -> StatePath:
    """Path frozen outside ``[t - K, t]``: value at node j is path((j v (t-K)) ^ t)."""
    n = path.node(t)
    k = int(round(K / path.dt))
    if n - k < path.start or n > path.stop:
        raise SpanError(f"path does not cover [t-K, t] = [{(n - k) * path.dt:g}, {n * path.dt:g}]")
    idx = np.clip(np.arange(path.start, path.stop + 1), n - k, n) - path.start
    return StatePath(path.values[..., idx, :], path.start, path.dt)


def shift_forward(zbar: StatePath, t: float, T: float) -> StatePath:
    """theta_t: map a path on [-K, 0] to [-K, T] with body on [t-K, t]."""
    n = zbar.node(t)
    N = zbar.node(T)
    k = -zbar.start
    if zbar.stop != 0:
        raise ValueError("shift_forward expects a path on [-K, 0]")
    if not 0 <= n <= N:
        raise ValueError(f"t={t} outside [0, T]")
    j = np.arange(-k, N + 1)
    idx = np.clip(j - n, -k, 0) + k
    return StatePath(zbar.values[..., idx, :], -k, zbar.dt)


def shift_back(Z: StatePath, t: float, K: float) -> StatePath:
    """theta_{-t}: (theta_{-t} Z)(s) = Z(s + t) for s in [-K, 0]."""
    n = Z.node(t)
    k = int(round(K / Z.dt))
    lo, hi = n - k, n
    if lo < Z.start or hi > Z.stop:
        raise SpanError(f"Z spans [{Z.start}, {Z.stop}] but [{lo}, {hi}] is needed")
    return StatePath(Z.values[..., lo - Z.start: hi - Z.start + 1, :], -k, Z.dt)
