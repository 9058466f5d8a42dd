import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from pathsmp.spaces import (
    GelfandTriple,
    GridError,
    NoiseEnsemble,
    OperatorPair,
    QWienerConfig,
    build_grid,
    check_coercivity,
    ito_integral,
    ito_isometry_gap,
    sample_noise,
)


def test_grid_basic():
    g = build_grid(1.0, 0.25, 16)
    assert (g.dt, g.k, g.n_state) == (1 / 16, 4, 21)
    assert g.node_range("adjoint") == (0, 20)
    assert g.nodes("state")[0] == -0.25
    assert g.index(0.5) == 8


def test_grid_misaligned_suggests_step_count():
    with pytest.raises(GridError, match="try n_steps=30"):
        build_grid(1.0, 0.3, 32)


@pytest.mark.parametrize("T,K,n", [(0.0, 0.1, 4), (1.0, -0.1, 4), (1.0, 0.1, 0)])
def test_grid_rejects_bad_inputs(T, K, n):
    with pytest.raises(GridError):
        build_grid(T, K, n)


def test_grid_index_off_node():
    with pytest.raises(GridError):
        build_grid(1.0, 0.0, 4).index(0.1)


@given(st.integers(1, 200), st.integers(0, 40))
def test_grid_alignment_property(n, k):
    if k > n:
        k = n
    T = 1.0
    g = build_grid(T, k * T / n, n)
    assert g.k == k
    assert g.k * g.dt == pytest.approx(g.K)


def test_gelfand_norms_ordering():
    tr = GelfandTriple(np.array([1.0, 2.0, 5.0]))
    u = np.array([0.3, -1.0, 0.2])
    assert tr.norm_star(u) <= tr.norm_H(u) <= tr.norm_V(u)


def test_gelfand_rejects_small_weights():
    with pytest.raises(ValueError):
        GelfandTriple(np.array([0.5, 1.0]))


def test_qwiener_l20_norm():
    cfg = QWienerConfig(np.array([1.0, 0.25]))
    F = np.array([[1.0, 2.0], [0.0, 2.0]])
    assert float(cfg.l20_norm_sq(F)) == pytest.approx(1.0 + 0.25 * 8.0)


def test_qwiener_negative_eigen():
    with pytest.raises(ValueError):
        QWienerConfig(np.array([1.0, -0.1]))


def test_noise_prefix_and_reproducible():
    g = build_grid(1.0, 0.0, 8)
    cfg = QWienerConfig.cylindrical(2)
    a = sample_noise(cfg, g, 5, seed=9)
    b = sample_noise(cfg, g, 3, seed=9)
    np.testing.assert_array_equal(a.dW[:3], b.dW)
    assert not np.array_equal(a.dW, sample_noise(cfg, g, 5, seed=10).dW)


def test_noise_moments():
    g = build_grid(1.0, 0.0, 4)
    ens = sample_noise(QWienerConfig.cylindrical(1), g, 20000, seed=1)
    assert abs(ens.dW.mean()) < 4 * np.sqrt(g.dt / ens.dW.size)
    assert ens.dW.var() == pytest.approx(g.dt, rel=0.03)


def test_coarsen_keeps_brownian_path():
    g = build_grid(1.0, 0.0, 8)
    ens = sample_noise(QWienerConfig.cylindrical(1), g, 4, seed=2)
    c = ens.coarsen(4)
    assert c.dt == pytest.approx(0.5)
    np.testing.assert_allclose(c.dW.sum(axis=1), ens.dW.sum(axis=1), atol=1e-14)


def test_scrambled_after_preserves_past():
    g = build_grid(1.0, 0.0, 8)
    ens = sample_noise(QWienerConfig.cylindrical(1), g, 4, seed=2)
    s = ens.scrambled_after(5, seed=1)
    np.testing.assert_array_equal(s.dW[:, :5], ens.dW[:, :5])
    assert not np.array_equal(s.dW[:, 5:], ens.dW[:, 5:])


def test_zero_ensemble_is_deterministic():
    assert NoiseEnsemble.zeros(build_grid(1.0, 0.0, 4)).is_deterministic


def test_ito_integral_constant_integrand():
    g = build_grid(1.0, 0.0, 8)
    cfg = QWienerConfig(np.array([4.0]))
    ens = sample_noise(cfg, g, 3, seed=0)
    f = np.ones((1, 8, 1, 1))
    I = ito_integral(f, ens, cfg)
    np.testing.assert_allclose(I[:, -1, 0], 2.0 * ens.dW.sum(axis=(1, 2)), rtol=1e-13)


def test_ito_isometry():
    g = build_grid(1.0, 0.0, 16)
    cfg = QWienerConfig(np.array([1.0, 0.5]))
    ens = sample_noise(cfg, g, 20000, seed=4)
    t = np.arange(16) * g.dt
    f = np.zeros((1, 16, 1, 2))
    f[0, :, 0, 0] = np.cos(t)
    f[0, :, 0, 1] = 1.0
    lhs, rhs = ito_isometry_gap(f, ens, cfg)
    assert lhs == pytest.approx(rhs, rel=0.05)


def test_ito_integral_shape_check():
    g = build_grid(1.0, 0.0, 8)
    cfg = QWienerConfig.cylindrical(1)
    with pytest.raises(ValueError):
        ito_integral(np.ones((1, 7, 1, 1)), sample_noise(cfg, g, 2, 0), cfg)


def test_coercivity_detects_violation():
    g = build_grid(1.0, 0.0, 4)
    good = OperatorPair.constant(g, -np.eye(2), np.zeros((1, 2, 2)), alpha=1.0, lam=0.0)
    bad = OperatorPair.constant(g, np.eye(2), np.zeros((1, 2, 2)), alpha=1.0, lam=0.0)
    tr = GelfandTriple.flat(2)
    assert check_coercivity(good, tr).ok
    rep = check_coercivity(bad, tr)
    assert not rep.ok and rep.worst_node == 0


def test_coercivity_heat_pair_is_tight():
    # 2<a u'', u> + |b u'|^2 = -(2a - b^2)|u'|^2, exactly alpha |u|_V^2 - alpha |u|^2
    from pathsmp.scenarios import heat_basis, heat_derivative

    a, b = 0.02, 0.1
    g = build_grid(1.0, 0.0, 4)
    wn = heat_basis(2)
    ops = OperatorPair.constant(g, -a * np.diag(wn**2), b * heat_derivative(2)[None],
                                alpha=2 * a - b * b, lam=2 * a - b * b)
    rep = check_coercivity(ops, GelfandTriple(np.sqrt(1 + wn**2)), trials=32)
    assert rep.ok


def test_implicit_factors_singular():
    g = build_grid(1.0, 0.0, 4)
    ops = OperatorPair.constant(g, 4.0 * np.eye(1))
    with pytest.raises(np.linalg.LinAlgError, match="reduce the step"):
        ops.implicit_factors(0.25)


@settings(max_examples=25)
@given(st.integers(1, 4), st.integers(1, 3), st.floats(0.01, 0.5))
def test_implicit_factors_invert(d, m, dt):
    rng = np.random.default_rng(d * 10 + m)
    g = build_grid(1.0, 0.0, 3)
    A = -np.eye(d) + 0.1 * rng.standard_normal((d, d))
    ops = OperatorPair.constant(g, A, rng.standard_normal((m, d, d)))
    S = ops.implicit_factors(dt)
    np.testing.assert_allclose(S[0] @ (np.eye(d) - dt * A), np.eye(d), atol=1e-12)
    x = rng.standard_normal((5, d))
    Bx = ops.apply_B(0, x)
    assert Bx.shape == (5, d, m)
    np.testing.assert_allclose(Bx[:, :, 0], x @ ops.B[0, 0].T)
