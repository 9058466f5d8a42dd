import numpy as np
import pytest

from pathsmp.config import config_from_dict
from pathsmp.forward import LinearDelayCoefficients
from pathsmp.measures import FiniteMeasure
from pathsmp.regression import RegressionBasis
from pathsmp.scenarios import build_scenario
from pathsmp.smp import (
    CallableCost,
    ControlConstraint,
    ControlProblem,
    LineSearchError,
    QuadraticCost,
    SolverOptions,
    coordinate_fd_gradient,
    cost_adjoint,
    evaluate,
    fd_gradient_check,
    hamiltonian,
    hamiltonian_dv,
    l2_inner,
    linearize,
    project_control,
    projected_gradient_descent,
    smp_gradient,
    sufficiency_certificate,
)
from pathsmp.spaces import NoiseEnsemble, OperatorPair, build_grid

DET_CASES = [
    ("lq_basic", {"kind": "atoms", "atoms": [[0, 0.5], [-0.25, 0.5]]}, {}),
    ("lq_basic", {"kind": "dirac", "at": -0.25}, {"lq_basic": {"G1": 0.5}}),
    ("nonlinear_delay", {"kind": "dirac", "at": -0.125}, {}),
    ("nonlinear_delay", {"kind": "trapezoid"}, {}),
]


def scenario(name, mu1=None, extra=None, n_steps=16, n_paths=4, **kw):
    d = {"scenario": name, "grid": {"T": 1.0, "n_steps": n_steps, "K": 0.25}, "mc": {"n_paths": n_paths}}
    if mu1:
        d["measures"] = {"mu1": mu1}
    d.update(extra or {})
    d.update(kw)
    return build_scenario(config_from_dict(d))


@pytest.mark.parametrize("name,mu1,extra", DET_CASES)
def test_deterministic_gradient_matches_coordinate_fd(name, mu1, extra):
    sc = scenario(name, mu1, extra)
    ens = NoiseEnsemble.zeros(sc.grid, sc.problem.m)
    u = sc.problem.control(0.3)
    rep, _, _ = smp_gradient(sc.problem, u, ens)
    fd = coordinate_fd_gradient(sc.problem, u, ens, 1e-4)
    g = sc.grid
    G = rep.G[0, g.k:g.k + g.n_steps] * g.dt
    assert np.max(np.abs(fd - G)) <= 1e-6 * np.max(np.abs(G))


@pytest.mark.parametrize("name,mu1,extra", DET_CASES)
def test_deterministic_three_way_central(name, mu1, extra):
    sc = scenario(name, mu1, extra)
    ens = NoiseEnsemble.zeros(sc.grid, sc.problem.m)
    u_bar = sc.problem.control(0.1)
    dirn = sc.problem.control(np.sin(np.linspace(0, 3, sc.grid.n_steps + 1))[:, None])
    rep = fd_gradient_check(sc.problem, u_bar, u_bar + dirn, [1e-3], ens, scheme="central")
    assert rep.max_rel_disagreement() <= 1e-6


def test_stochastic_three_way_crn():
    sc = scenario("lq_basic", n_paths=1024)
    u_bar = sc.problem.control(0.0)
    dirn = sc.problem.control(np.cos(np.linspace(0, 2, sc.grid.n_steps + 1))[:, None])
    rep = fd_gradient_check(sc.problem, u_bar, u_bar + dirn, [1e-3], sc.ens, sc.opts)
    assert rep.max_rel_disagreement() <= 0.05


def test_cost_adjoint_is_minus_one_bitwise():
    sc = scenario("lq_basic", n_paths=64)
    ev = evaluate(sc.problem, sc.problem.control(0.2), sc.ens, sc.opts)
    k = cost_adjoint(sc.problem, ev, linearize(sc.problem, ev))
    assert np.array_equal(k, np.full_like(k, -1.0))


def test_cost_adjoint_exponential_with_G1():
    sc = scenario("lq_basic", extra={"lq_basic": {"G1": 0.5}}, n_paths=1)
    ens = NoiseEnsemble.zeros(sc.grid, sc.problem.m)
    ev = evaluate(sc.problem, sc.problem.control(0.0), ens)
    k = cost_adjoint(sc.problem, ev, linearize(sc.problem, ev))
    N = sc.grid.n_steps
    assert k[0, N] == pytest.approx(-(1 + 0.5 / N) ** N, rel=1e-13)


def test_hamiltonian_by_hand():
    b = np.array([[1.0, 2.0]])
    sigma = np.array([[[1.0, 0.0], [0.0, 2.0]]])
    p = np.array([[3.0, -1.0]])
    q = np.array([[[1.0, 1.0], [1.0, 0.5]]])
    H = hamiltonian(b, sigma, 4.0, p, q, -1.0, sqrt_eig=[1.0, 2.0])
    # <b,p> = 1; sum_j sqrt(lam_j) <sigma_j, q_j> = 1 + 2 * 1 = 3; -f k = 4
    assert H[0] == pytest.approx(8.0)
    bv = np.array([[[1.0], [0.0]]])
    sv = np.zeros((1, 2, 2, 1))
    sv[0, 1, 1, 0] = 1.0
    dH = hamiltonian_dv(bv, sv, np.array([[2.0]]), p, q, np.array([-1.0]), sqrt_eig=[1.0, 2.0])
    assert dH[0, 0] == pytest.approx(3.0 + 2.0 * 0.5 + 2.0)


def test_l2_inner_weights():
    a = np.ones((2, 6, 1))
    assert l2_inner(a, a, 2, 3, 0.5) == pytest.approx(1.5)


@pytest.mark.parametrize("kind,kw,u,expect", [
    ("box", {"lo": -1.0, "hi": 0.5}, [[2.0], [-3.0], [0.1]], [[0.5], [-1.0], [0.1]]),
    ("ball", {"radius": 1.0}, [[3.0, 4.0], [0.3, 0.4]], [[0.6, 0.8], [0.3, 0.4]]),
    ("none", {}, [[7.0]], [[7.0]]),
])
def test_constraint_projection(kind, kw, u, expect):
    c = ControlConstraint(kind, **kw)
    out = c.project(np.array(u))
    np.testing.assert_allclose(out, expect)
    assert c.contains(out)
    np.testing.assert_allclose(c.project(out), out)


def test_constraint_validation():
    with pytest.raises(ValueError, match="unknown"):
        ControlConstraint("simplex")
    with pytest.raises(ValueError, match="lo > hi"):
        ControlConstraint("box", lo=1.0, hi=0.0)
    with pytest.raises(ValueError, match="radius"):
        ControlConstraint("ball", radius=-1.0)
    with pytest.raises(ValueError, match="adjoint"):
        SolverOptions(adjoint="exact")


def test_projection_keeps_prehistory():
    sc = scenario("lq_basic", extra={"optimizer": {"constraint": {"kind": "box", "lo": -0.1, "hi": 0.1}}})
    u = np.full((1, sc.grid.k + sc.grid.n_steps + 1, 1), 5.0)
    out = project_control(sc.problem, u)
    assert np.all(out[:, : sc.grid.k] == 5.0) and np.all(out[:, sc.grid.k:] == 0.1)


def test_descent_deterministic_box_kkt():
    sc = scenario("lq_basic", extra={"optimizer": {"constraint": {"kind": "box", "lo": -0.3, "hi": 0.3}}})
    ens = NoiseEnsemble.zeros(sc.grid, sc.problem.m)
    res = projected_gradient_descent(sc.problem, sc.problem.control(0.0), ens, tol=1e-8, max_iter=500)
    assert res.converged
    J = [t[1] for t in res.trace]
    assert all(b <= a for a, b in zip(J, J[1:]))
    g = sc.grid
    u = res.u[0, g.k:g.k + g.n_steps, 0]
    G = res.gradient.G[0, g.k:g.k + g.n_steps, 0]
    assert np.all(np.abs(u) <= 0.3 + 1e-15)
    inner = np.abs(u) < 0.3 - 1e-6
    assert np.all(np.abs(G[inner]) <= 1e-6)
    # at an active bound the gradient points outward
    assert np.all(G[u >= 0.3 - 1e-12] <= 1e-8) and np.all(G[u <= -0.3 + 1e-12] >= -1e-8)


def test_descent_stochastic_reaches_tolerance():
    sc = scenario("lq_basic", n_paths=512)
    res = projected_gradient_descent(sc.problem, sc.problem.control(0.0), sc.ens, sc.opts, tol=1e-3)
    assert res.converged
    assert res.trace[-1][2] <= 1e-3 * res.initial_residual


def test_line_search_error_carries_result():
    sc = scenario("lq_basic")
    ens = NoiseEnsemble.zeros(sc.grid, sc.problem.m)
    with pytest.raises(LineSearchError) as info:
        projected_gradient_descent(sc.problem, sc.problem.control(0.0), ens, step=1e8, budget=1)
    assert info.value.result is not None and len(info.value.result.trace) == 1


def test_zero_gradient_start_converges_immediately():
    g = build_grid(1.0, 0.0, 8)
    ops = OperatorPair.constant(g, [[-1.0]])
    co = LinearDelayCoefficients([0], [[[0.0]]], [[0.0]])
    prob = ControlProblem(g, ops, co, QuadraticCost([[1.0]], [[1.0]], [[1.0]]),
                          FiniteMeasure.dirac(0, g.dt), FiniteMeasure.dirac(0, g.dt), np.zeros((1, 1)))
    res = projected_gradient_descent(prob, prob.control(0.0), NoiseEnsemble.zeros(g))
    assert res.converged and len(res.trace) == 1


def test_sufficiency_certificate_lq():
    sc = scenario("lq_basic", n_paths=256)
    res = projected_gradient_descent(sc.problem, sc.problem.control(0.0), sc.ens, sc.opts, tol=1e-4)
    cert = sufficiency_certificate(sc.problem, res.u, sc.ens, sc.opts, n_perturb=20)
    assert cert.all_pass, cert


def test_sufficiency_detects_nonconvex_terminal():
    g = build_grid(1.0, 0.0, 8)
    ops = OperatorPair.constant(g, [[-1.0]])
    co = LinearDelayCoefficients([0], [[[0.0]]], [[1.0]])
    cost = CallableCost(lambda n, X, y, z, v: v[:, 0] ** 2, lambda x1: -x1[:, 0] ** 2,
                        dv=lambda n, X, y, z, v: 2 * v, terminal_dx=lambda x1: -2 * x1)
    prob = ControlProblem(g, ops, co, cost, FiniteMeasure.dirac(0, g.dt), FiniteMeasure.dirac(0, g.dt),
                          np.ones((1, 1)))
    cert = sufficiency_certificate(prob, prob.control(0.0), NoiseEnsemble.zeros(g), n_perturb=5)
    assert not cert.h_convex and not cert.all_pass


def test_regression_adjoint_mode_runs():
    sc = scenario("nonlinear_delay", n_paths=256)
    opts = SolverOptions(RegressionBasis(1, True), "regression")
    rep, ev, adj = smp_gradient(sc.problem, sc.problem.control(0.0), sc.ens, opts)
    assert not adj.cond.is_identity and np.all(np.isfinite(rep.G))


def test_control_shape_helpers():
    sc = scenario("lq_basic")
    g = sc.grid
    u = sc.problem.control(0.5)
    assert u.shape == (1, g.k + g.n_steps + 1, 1)
    assert np.all(u[0, : g.k] == 0.0) and np.all(u[0, g.k:] == 0.5)
    many = sc.problem.control(np.ones((3, g.n_steps + 1, 1)))
    assert many.shape == (3, g.k + g.n_steps + 1, 1)
