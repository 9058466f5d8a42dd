import csv

import numpy as np
import pytest

from pathsmp.backward import (
    ABSEEProblem,
    RunningTerminal,
    energy_identity_check,
    solve_absee,
    solve_cost_adjoint_k,
    translate_running_terminal,
    translation_shift,
)
from pathsmp.forward import NumericalError
from pathsmp.identities import energy_jump_suite, energy_smooth_slope
from pathsmp.regression import Conditioner
from pathsmp.spaces import NoiseEnsemble, QWienerConfig, build_grid, sample_noise

from oracles import IncrementBasis, random_absee


def dyadic_problem(node, zdF, N=8, k=0, d=1):
    # dt = 1/8, M = 4: (1 - dt M)^{-1} = 2 exactly
    M = np.full((N + 1, d, d), 4.0) * np.eye(d)
    term = RunningTerminal([node], [1.0], np.full((1, 1, d), zdF))
    return ABSEEProblem(N=N, k=k, dt=1.0 / N, d=d, M=M, terminal=term)


@pytest.mark.parametrize("node", [1, 4, 8])
@pytest.mark.parametrize("zdF", [0.75, -3.0])
def test_single_jump_hand_oracle(node, zdF):
    g = build_grid(1.0, 0.0, 8)
    sol = solve_absee(dyadic_problem(node, zdF), NoiseEnsemble.zeros(g))
    expect = np.array([zdF * 2.0 ** (node - n) if n < node else 0.0 for n in range(9)])
    np.testing.assert_array_equal(sol.p[0, :, 0], expect)


def test_zero_data_zero_solution():
    rng = np.random.default_rng(1)
    g = build_grid(1.0, 0.0, 12)
    ens = sample_noise(QWienerConfig.cylindrical(2), g, 64, 3)
    pr = random_absee(rng, ens, stochastic=False)
    k, d = pr.k, pr.d
    pr.xi = np.zeros((1, k + 1, d))
    pr.terminal = RunningTerminal(pr.terminal.nodes, pr.terminal.dF, np.zeros_like(pr.terminal.zeta))
    cond = Conditioner.regression(IncrementBasis(ens.dW), ens.dW, 0)
    sol = solve_absee(pr, ens, cond)
    assert np.max(np.abs(sol.p)) <= 1e-14 and np.max(np.abs(sol.q)) <= 1e-14


@pytest.mark.parametrize("c", [2.0, -0.5])
def test_homogeneity_exact(c):
    rng = np.random.default_rng(2)
    g = build_grid(1.0, 0.0, 12)
    ens = sample_noise(QWienerConfig.cylindrical(2), g, 32, 3)
    pr = random_absee(rng, ens, stochastic=False)
    s1 = solve_absee(pr, ens)
    pr.xi = c * pr.xi
    pr.terminal = RunningTerminal(pr.terminal.nodes, pr.terminal.dF, c * pr.terminal.zeta)
    s2 = solve_absee(pr, ens)
    np.testing.assert_array_equal(s2.p, c * s1.p)
    np.testing.assert_array_equal(s2.q, c * s1.q)


def test_translation_deterministic():
    rng = np.random.default_rng(0)
    g = build_grid(1.0, 0.0, 12)
    ens = NoiseEnsemble.zeros(g, 2, 1)
    for _ in range(20):
        pr = random_absee(rng, ens, stochastic=False)
        a = solve_absee(pr, ens)
        npr, _, back = translate_running_terminal(pr)
        assert npr.terminal is None
        b = back(solve_absee(npr, ens))
        scale = np.max(np.abs(a.p))
        assert np.max(np.abs(a.p[:, : pr.N] - b.p[:, : pr.N])) <= 1e-12 * scale


def test_translation_stochastic_exact_basis():
    rng = np.random.default_rng(4)
    g = build_grid(1.0, 0.0, 8)
    ens = sample_noise(QWienerConfig.cylindrical(2), g, 500, 3)
    cond = Conditioner.regression(IncrementBasis(ens.dW), ens.dW, 0)
    for _ in range(5):
        pr = random_absee(rng, ens, stochastic=True)
        a = solve_absee(pr, ens, cond)
        npr, _, back = translate_running_terminal(pr)
        b = back(solve_absee(npr, ens, cond))
        se = np.std(a.p_step[:, 0]) / np.sqrt(ens.n_paths)
        assert np.max(np.abs(a.p[:, : pr.N] - b.p[:, : pr.N])) <= 3 * se


def test_translation_shift_cumulative():
    term = RunningTerminal([2, 5], [0.5, 0.25], [[[2.0], [4.0]]])
    pr = ABSEEProblem(N=6, k=0, dt=1 / 6, d=1, terminal=term)
    np.testing.assert_array_equal(translation_shift(pr)[0, :, 0], [0, 0, 1, 1, 1, 2, 2])
    plain = ABSEEProblem(N=6, k=0, dt=1 / 6, d=1)
    npr, alpha, back = translate_running_terminal(plain)
    assert npr is plain and not np.any(alpha)


def test_martingale_representation_q():
    # xi = W_T with identity dynamics: p_n = W_n and q = 1 up to sampling error
    g = build_grid(1.0, 0.0, 8)
    ens = sample_noise(QWienerConfig.cylindrical(1), g, 4000, 7)
    WT = ens.dW.sum(axis=1)
    pr = ABSEEProblem(N=8, k=0, dt=g.dt, d=1, xi=WT[:, None, :])
    cond = Conditioner.regression(IncrementBasis(ens.dW), ens.dW, 0)
    sol = solve_absee(pr, ens, cond)
    W = np.concatenate([np.zeros((4000, 1)), np.cumsum(ens.dW[:, :, 0], axis=1)], axis=1)
    # at node 0 only the intercept is available: p_0 is the sample mean
    assert sol.p[0, 0, 0] == pytest.approx(np.mean(WT), abs=1e-14)
    assert np.sqrt(np.mean((sol.p[:, :, 0] - W) ** 2)) < 0.05
    assert abs(np.mean(sol.q[:, :8, 0, 0]) - 1.0) < 0.05


def test_exponential_k_deterministic():
    G1, errs = 0.7, []
    for N in (16, 32, 64, 128):
        g = build_grid(1.0, 0.0, N)
        k = solve_cost_adjoint_k(np.full(N, G1), np.zeros((N, 1)), NoiseEnsemble.zeros(g))
        assert k[0, -1] == pytest.approx(-(1 + G1 / N) ** N, rel=1e-13)
        errs.append(abs(k[0, -1] + np.exp(G1)))
    ratios = np.array(errs[:-1]) / np.array(errs[1:])
    assert np.all(np.abs(ratios - 2.0) < 0.1)


def test_exponential_k_stochastic_mean():
    G2, N, P = 0.4, 32, 20000
    g = build_grid(1.0, 0.0, N)
    ens = sample_noise(QWienerConfig.cylindrical(1), g, P, 2)
    k = solve_cost_adjoint_k(np.zeros(N), np.full((N, 1), G2), ens)
    kN = k[:, -1]
    assert abs(np.mean(kN) + 1.0) <= 3 * np.std(kN) / np.sqrt(P)


def test_k_blowup_raises():
    g = build_grid(1.0, 0.0, 4)
    with np.errstate(over="ignore", invalid="ignore"):
        with pytest.raises(NumericalError):
            solve_cost_adjoint_k(np.full(4, 1e300), np.zeros((4, 1)), NoiseEnsemble.zeros(g))


def test_energy_pure_jump_exact():
    assert energy_jump_suite(n=20, seed=3).worst == 0.0


def test_energy_smooth_first_order():
    slope, res = energy_smooth_slope(seed=1)
    assert abs(slope - 1.0) <= 0.2
    assert all(b < a for a, b in zip(res, res[1:]))


def test_energy_mixed_balance():
    # jumps cancel algebraically; the residual is sum dt^2 |v|^2 + 2 dt <v, dM>,
    # and dyadic data make every term exact
    rng = np.random.default_rng(0)
    P, N = 2, 8
    v = rng.integers(-4, 5, (P, N, 1)) / 8.0
    dM = rng.integers(-4, 5, (P, N, 1)) / 4.0
    J = np.zeros((P, N + 1, 1))
    J[:, 3] = 0.5
    rep = energy_identity_check(np.ones((P, 1)), v, dM, J, 1.0 / 8)
    smooth = energy_identity_check(np.ones((P, 1)), v, dM, 0 * J, 1.0 / 8)
    dt = 1.0 / 8
    expect = abs(float(np.mean(np.sum(dt * dt * v**2 + 2 * dt * v * dM, axis=(1, 2)))))
    assert rep.residual == smooth.residual == expect


def test_problem_validation():
    with pytest.raises(ValueError, match="xi must"):
        ABSEEProblem(N=4, k=1, dt=0.25, d=1, xi=np.zeros((1, 1, 1)))
    with pytest.raises(ValueError, match="eta must"):
        ABSEEProblem(N=4, k=1, dt=0.25, d=1, eta=np.zeros((1, 2, 1, 1)))
    term = RunningTerminal([1, 2], [1.0, -2.0], np.ones((1, 2, 1)))
    assert term.total_variation == 3.0
    with pytest.raises(ValueError, match="K_F"):
        ABSEEProblem(N=4, k=0, dt=0.25, d=1, terminal=term, KF=2.0)
    with pytest.raises(ValueError, match=r"\(0, T\]"):
        RunningTerminal([0], [1.0], np.ones((1, 1, 1)))
    with pytest.raises(ValueError, match="disagree"):
        RunningTerminal([1, 2], [1.0], np.ones((1, 2, 1)))
    with pytest.raises(ValueError, match="beyond T"):
        RunningTerminal([9], [1.0], np.ones((1, 1, 1))).increments(4)
    g = build_grid(1.0, 0.0, 8)
    with pytest.raises(ValueError, match="disagree on N"):
        solve_absee(ABSEEProblem(N=4, k=0, dt=0.25, d=1), NoiseEnsemble.zeros(g))


def test_from_jumps_rounds_to_nodes():
    term = RunningTerminal.from_jumps([0.25, 0.5], [1.0, 2.0], np.ones((1, 2, 1)), 0.125)
    np.testing.assert_array_equal(term.nodes, [2, 4])


def test_nonfinite_generator_raises():
    g = build_grid(1.0, 0.0, 4)
    pr = ABSEEProblem(N=4, k=0, dt=0.25, d=1, generator=lambda n, ps, qs: np.full((ps.shape[0], 1), np.inf))
    with pytest.raises(NumericalError, match="non-finite adjoint"):
        solve_absee(pr, NoiseEnsemble.zeros(g))


def test_to_csv(tmp_path):
    g = build_grid(1.0, 0.0, 8)
    sol = solve_absee(dyadic_problem(4, 1.0), NoiseEnsemble.zeros(g))
    path = tmp_path / "p.csv"
    sol.to_csv(path)
    rows = list(csv.reader(open(path)))
    assert rows[0] == ["path", "t", "p_1", "q_frobenius"]
    assert float(rows[1][2]) == 16.0
