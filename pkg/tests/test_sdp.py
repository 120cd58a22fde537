import numpy as np
import pytest

from scmpc.sdp import SdpProblem, SdpStatus, solve_sdp, sym_basis, sym_to_vec, vec_to_sym

from oracles import grid_refine_oracle, random_box_lmi_instance


def test_trace_domination_analytic():
    # min tr(X) s.t. X >= A has optimum tr(A)
    rng = np.random.default_rng(3)
    A = rng.normal(size=(3, 3))
    A = 0.5 * (A + A.T)
    Fs = np.array(sym_basis(3))
    c = np.array([1.0 if i == j else 0.0 for i in range(3) for j in range(i, 3)])
    sol = solve_sdp(SdpProblem(c=c, blocks=[(-A, Fs)]))
    assert sol.status is SdpStatus.OPTIMAL
    assert sol.objective == pytest.approx(np.trace(A), abs=1e-7)
    X = vec_to_sym(sol.y, 3)
    assert np.linalg.eigvalsh(X - A).min() >= -1e-8


def test_two_by_two_psd_bound_analytic():
    # max t s.t. [[1, t], [t, 1]] >= 0 has optimum t = 1
    prob = SdpProblem(c=np.array([-1.0]), blocks=[(np.eye(2), np.array([[[0.0, 1], [1, 0]]]))])
    sol = solve_sdp(prob)
    assert sol.status is SdpStatus.OPTIMAL
    assert -sol.objective == pytest.approx(1.0, abs=1e-7)


@pytest.mark.parametrize("seed", range(20))
def test_random_instances_match_grid_oracle(seed):
    prob = random_box_lmi_instance(seed)
    sol = solve_sdp(prob)
    assert sol.status is SdpStatus.OPTIMAL
    oracle_val, _ = grid_refine_oracle(prob)
    assert sol.objective == pytest.approx(oracle_val, abs=1e-3)


def test_one_random_instance_tight_oracle_agreement():
    prob = random_box_lmi_instance(101)
    sol = solve_sdp(prob)
    oracle_val, _ = grid_refine_oracle(prob, stages=48, pts=17)
    assert sol.objective == pytest.approx(oracle_val, abs=1e-4)


def test_reported_point_is_feasible_and_residuals_verified():
    prob = random_box_lmi_instance(7)
    sol = solve_sdp(prob, tol_psd=1e-8)
    # re-verify residual eigenvalues with an independent eigensolver call
    recheck = prob.min_eigenvalues(sol.y)
    assert np.all(recheck >= -1e-8)
    np.testing.assert_allclose(recheck, sol.block_min_eig, rtol=0, atol=1e-12)


def test_weak_duality_against_feasible_sampling():
    prob = random_box_lmi_instance(11)
    sol = solve_sdp(prob)
    rng = np.random.default_rng(0)
    sampled = []
    while len(sampled) < 200:
        y = rng.uniform(-1, 1, size=prob.d)
        if prob.min_eigenvalues(y).min() >= 0:
            sampled.append(prob.c @ y)
    # the reported minimum is a lower bound for every feasible sample
    assert sol.objective <= min(sampled) + 1e-7


def test_deterministic_iterate_path():
    prob = random_box_lmi_instance(13)
    s1 = solve_sdp(prob)
    s2 = solve_sdp(prob)
    assert np.array_equal(s1.y, s2.y)
    assert s1.objective == s2.objective
    assert s1.newton_iters == s2.newton_iters


def test_infeasible_is_detected():
    # y >= 1 and y <= 0 simultaneously
    prob = SdpProblem(
        c=np.array([1.0]),
        blocks=[
            (np.array([[-1.0]]), np.array([[[1.0]]])),
            (np.array([[0.0]]), np.array([[[-1.0]]])),
        ],
    )
    sol = solve_sdp(prob)
    assert sol.status is SdpStatus.INFEASIBLE


def test_constant_infeasible_block():
    prob = SdpProblem(
        c=np.array([1.0]),
        blocks=[(np.array([[-2.0]]), np.array([[[0.0]]]))],
    )
    sol = solve_sdp(prob)
    assert sol.status is SdpStatus.INFEASIBLE


def test_sym_vec_roundtrip():
    rng = np.random.default_rng(1)
    S = rng.normal(size=(4, 4))
    S = 0.5 * (S + S.T)
    assert np.array_equal(vec_to_sym(sym_to_vec(S), 4), S)
