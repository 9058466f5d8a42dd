import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from pathsmp import kernels
from pathsmp.identities import random_instance
from pathsmp.measures import FiniteMeasure
from pathsmp.path_calculus import (
    KernelRepresentation,
    apply_rho,
    apply_rho_star,
    apply_rho_star_formula,
    change_of_variables_check,
    compute_bounds,
    duality_residual,
    integral_delay_kernel,
    rho_nonanticipative_gap,
    rho_star_anticipative_gap,
)


def dense_rho(rep, p=0):
    """Matrix of rho on one path, built by explicit loops (independent oracle)."""
    N, k, dF, dE = rep.N, rep.k, rep.dF, rep.dE
    pk = min(p, rep.kernel.shape[0] - 1)
    R = np.zeros(((N + 1) * dF, (k + N + 1) * dE))
    for n in range(N + 1):
        for i, (lag, w) in enumerate(zip(rep.nu0.lags, rep.nu0.weights)):
            col = n + int(lag) + k
            R[n * dF:(n + 1) * dF, col * dE:(col + 1) * dE] += w * rep.kernel[pk, n, i]
    return R


@settings(max_examples=60, deadline=None)
@given(st.integers(0, 2**31 - 1))
def test_duality_hypothesis(seed):
    rep, Z, Q = random_instance(np.random.default_rng(seed))
    assert duality_residual(rep, Z, Q).relative <= 1e-12


@pytest.mark.parametrize("seed", range(6))
def test_rho_matches_dense_loops(seed):
    rep, Z, Q = random_instance(np.random.default_rng(seed), P=2)
    for p in range(2):
        R = dense_rho(rep, p)
        got = apply_rho(rep, Z)[p].ravel()
        np.testing.assert_allclose(got, R @ Z[p].ravel(), rtol=1e-12, atol=1e-12)
        got_star = apply_rho_star(rep, Q)[p].ravel()
        np.testing.assert_allclose(got_star, R.T @ Q[p].ravel(), rtol=1e-12, atol=1e-12)


@pytest.mark.parametrize("kind", ["dirac0", "diracK", "atoms", "trapezoid"])
def test_formula_equals_transpose(kind):
    rng = np.random.default_rng(11)
    for _ in range(25):
        rep, _, Q = random_instance(rng, kind)
        np.testing.assert_allclose(apply_rho_star_formula(rep, Q), apply_rho_star(rep, Q),
                                   rtol=1e-12, atol=1e-12)


def test_backends_agree():
    backs = kernels.available_backends()
    rng = np.random.default_rng(5)
    for _ in range(10):
        rep, Z, Q = random_instance(rng)
        ref = backs["python"]
        for impl in backs.values():
            np.testing.assert_allclose(apply_rho(rep, Z, impl), apply_rho(rep, Z, ref), atol=1e-13)
            np.testing.assert_allclose(apply_rho_star(rep, Q, impl), apply_rho_star(rep, Q, ref), atol=1e-13)
            np.testing.assert_allclose(apply_rho_star_formula(rep, Q, impl),
                                       apply_rho_star_formula(rep, Q, ref), atol=1e-13)


def test_unbatched_input():
    rep, Z, Q = random_instance(np.random.default_rng(2), P=1)
    assert apply_rho(rep, Z[0]).shape == (rep.N + 1, rep.dF)
    np.testing.assert_array_equal(apply_rho(rep, Z[0]), apply_rho(rep, Z)[0])
    np.testing.assert_array_equal(apply_rho_star(rep, Q[0]), apply_rho_star(rep, Q)[0])


def test_shape_errors():
    rep, Z, Q = random_instance(np.random.default_rng(3))
    with pytest.raises(ValueError):
        apply_rho(rep, Z[:, 1:])
    with pytest.raises(ValueError):
        apply_rho_star(rep, Q[:, 1:])


@pytest.mark.parametrize("seed", range(5))
def test_nonanticipative_gaps_vanish(seed):
    rng = np.random.default_rng(seed)
    rep, Z, Q = random_instance(rng)
    for n in range(rep.N + 1):
        assert rho_nonanticipative_gap(rep, Z, n) == 0.0
    for u in range(-rep.k, rep.N + 1):
        assert rho_star_anticipative_gap(rep, Q, u) == 0.0


def test_constant_kernel_bounds():
    dt, k, N = 0.1, 3, 12
    nu = FiniteMeasure([0, -1, -3], [0.5, 1.0, 0.25], dt)
    ker = np.broadcast_to(2.0 * np.eye(2), (1, N + 1, 3, 2, 2)).copy()
    b = compute_bounds(KernelRepresentation(nu, ker, k))
    assert b.M0 == pytest.approx(2.0 * 1.75, rel=1e-14)
    assert b.M == pytest.approx(2.0 * 1.75, rel=1e-14)
    assert b.product == pytest.approx(b.M0 * b.M)


@pytest.mark.parametrize("seed", range(4))
def test_sampled_ratios_below_bounds(seed):
    rep, _, _ = random_instance(np.random.default_rng(seed))
    b = compute_bounds(rep, n_samples=20, seed=seed)
    assert b.max_rho_ratio <= b.M0**2 * (1 + 1e-12)
    assert b.max_rho_star_ratio <= b.M**2 * (1 + 1e-12)


@settings(max_examples=60, deadline=None)
@given(st.integers(0, 2**31 - 1))
def test_change_of_variables_hypothesis(seed):
    rng = np.random.default_rng(seed)
    N, k = int(rng.integers(1, 20)), int(rng.integers(0, 8))
    nu = FiniteMeasure(rng.choice(np.arange(-k, 1), size=min(k + 1, 3), replace=False),
                       rng.uniform(0.1, 1.0, min(k + 1, 3)), 0.05)
    G = rng.standard_normal((N + 1, nu.n_atoms))
    Kp = int(rng.integers(-k, N + 1))
    lhs, rhs = change_of_variables_check(G, nu, Kp, N, k)
    assert abs(lhs - rhs) <= 1e-12 * max(1.0, abs(lhs))


def test_change_of_variables_callable():
    nu = FiniteMeasure([0, -2], [1.0, 0.5], 0.25)
    lhs, rhs = change_of_variables_check(lambda n, i: n + 10 * i, nu, 1, 6, 2)
    assert lhs == pytest.approx(rhs, rel=1e-14)


def test_integral_delay_kernel_is_delay_integral():
    # rho_n(Z) = D_n * sum_i w_i Z(n + s_i)
    dt, k, N = 0.125, 4, 8
    mu = FiniteMeasure.trapezoid(k * dt, dt)
    D = np.arange(N + 1, dtype=float)[:, None, None]
    rep = integral_delay_kernel(D, mu, N, k)
    Z = np.sin(np.arange(-k, N + 1) * dt)[None, :, None]
    expect = np.array([n * sum(w * Z[0, n + int(s) + k, 0] for s, w in zip(mu.lags, mu.weights))
                       for n in range(N + 1)])
    np.testing.assert_allclose(apply_rho(rep, Z)[0, :, 0], expect, rtol=1e-14, atol=1e-15)
    rep2 = integral_delay_kernel(lambda n: [[float(n)]], mu, N, k)
    np.testing.assert_array_equal(rep2.kernel, rep.kernel)


def test_scaled_measure_scales_operator():
    rep, Z, _ = random_instance(np.random.default_rng(9))
    np.testing.assert_allclose(apply_rho(rep.scaled_measure(3.0), Z), 3.0 * apply_rho(rep, Z), rtol=1e-14)


def test_kernel_shape_validation():
    nu = FiniteMeasure([0, -2], [1.0, 1.0], 0.1)
    with pytest.raises(ValueError, match="does not match"):
        KernelRepresentation(nu, np.zeros((1, 5, 3, 1, 1)), 2)
    with pytest.raises(ValueError, match="further back"):
        KernelRepresentation(nu, np.zeros((1, 5, 2, 1, 1)), 1)
