import numpy as np
import pytest

from scmpc.model import MassSpringDamperChain
from scmpc.ocp import (
    OcpProblem,
    OcpStatus,
    roll_chain,
    rollout_cost_gradient,
    shift_candidate,
    solve_ocp,
    trajectory_cost,
)
from scmpc.qp import QpStatus, qp_solve, solve_qp_ineq


def riccati_inputs(A, B, Q, R, P, N, x0):
    """Backward Riccati recursion and forward rollout; the LQR oracle."""
    Pk = P.copy()
    gains = []
    for _ in range(N):
        K = np.linalg.solve(R + B.T @ Pk @ B, B.T @ Pk @ A)
        Pk = Q + A.T @ Pk @ (A - B @ K)
        gains.append(K)
    gains = gains[::-1]
    xs, us = [np.asarray(x0, dtype=float)], []
    for i in range(N):
        u = -gains[i] @ xs[-1]
        us.append(u)
        xs.append(A @ xs[-1] + B @ u)
    return np.array(us), np.array(xs)


def unconstrained_problem(model, N, Q=None, R=None, P=None):
    n = model.n
    Q = np.eye(n) if Q is None else Q
    R = 0.1 * np.eye(model.m) if R is None else R
    P = 10.0 * np.eye(n) if P is None else P
    return OcpProblem(
        model=model, N=N, Q=Q, R=R, P=P,
        H_rows=np.zeros((1, n)), margins=np.ones((N, 1)),
        M_term=np.eye(n), alpha_f=1e12,
        u_min=-1e9 * np.ones(model.m), u_max=1e9 * np.ones(model.m),
    )


# --- qp_solve -------------------------------------------------------------


def test_qp_box_clipping():
    # min (u-3)^2 over u in [-1, 1] clips to the boundary
    sol = solve_qp_ineq(np.array([[2.0]]), np.array([-6.0]),
                        np.array([[1.0], [-1.0]]), np.array([1.0, 1.0]))
    assert sol.status is QpStatus.OPTIMAL
    assert sol.x[0] == pytest.approx(1.0, abs=1e-12)
    # KKT stationarity with the returned multipliers
    assert 2.0 * sol.x[0] - 6.0 + sol.mu[0] == pytest.approx(0.0, abs=1e-10)


def test_qp_equality_constrained_matches_kkt_oracle():
    rng = np.random.default_rng(2)
    for _ in range(20):
        n, me = 6, 2
        A = rng.normal(size=(n, n))
        H = A @ A.T + n * np.eye(n)
        g = rng.normal(size=n)
        Aeq = rng.normal(size=(me, n))
        beq = rng.normal(size=me)
        sol = qp_solve(H, g, A_eq=Aeq, b_eq=beq)
        assert sol.status is QpStatus.OPTIMAL
        kkt = np.block([[H, Aeq.T], [Aeq, np.zeros((me, me))]])
        ref = np.linalg.solve(kkt, np.concatenate([-g, beq]))
        np.testing.assert_allclose(sol.x, ref[:n], atol=1e-9)
        np.testing.assert_allclose(sol.lam, ref[n:], atol=1e-8)


def test_qp_random_matches_projected_gradient():
    rng = np.random.default_rng(8)
    for _ in range(10):
        n = 8
        A = rng.normal(size=(n, n))
        H = A @ A.T + n * np.eye(n)
        g = rng.normal(size=n) * 3
        lo = -rng.uniform(0.1, 1.0, n)
        hi = rng.uniform(0.1, 1.0, n)
        C = np.vstack([np.eye(n), -np.eye(n)])
        d = np.concatenate([hi, -lo])
        sol = solve_qp_ineq(H, g, C, d)
        assert sol.status is QpStatus.OPTIMAL
        # slow reference: projected gradient to high accuracy
        L = np.linalg.eigvalsh(H).max()
        x = np.zeros(n)
        for _ in range(60_000):
            x = np.clip(x - (H @ x + g) / L, lo, hi)
        np.testing.assert_allclose(sol.x, x, atol=1e-8)


def test_qp_infeasible_detected():
    # x <= -1 and x >= 1 simultaneously
    sol = solve_qp_ineq(np.array([[1.0]]), np.array([0.0]),
                        np.array([[1.0], [-1.0]]), np.array([-1.0, -1.0]))
    assert sol.status is QpStatus.INFEASIBLE


# --- solve_ocp ------------------------------------------------------------


@pytest.fixture(scope="module")
def linear_chain():
    # disabling friction makes the benchmark chain exactly linear
    return MassSpringDamperChain(friction_force=0.0)


def test_ocp_matches_riccati(linear_chain):
    model = linear_chain
    N = 12
    prob = unconstrained_problem(model, N)
    rng = np.random.default_rng(5)
    for _ in range(3):
        x0 = rng.normal(size=6)
        sol = solve_ocp(prob, x0, x0)
        assert sol.solved
        A = model.jacobian(np.zeros(6), np.zeros(1))
        B = model.input_jacobian(np.zeros(6), np.zeros(1))
        u_ref, _ = riccati_inputs(A, B, prob.Q, prob.R, prob.P, N, x0)
        assert np.abs(sol.u - u_ref).max() <= 1e-6


def test_ocp_equilibrium_is_zero():
    model = MassSpringDamperChain()
    N = 8
    prob = unconstrained_problem(model, N)
    sol = solve_ocp(prob, np.zeros(6), np.zeros(6))
    assert sol.solved
    assert np.abs(sol.u).max() <= 1e-9
    assert sol.objective <= 1e-12


def test_ocp_stage0_violation_is_infeasible():
    model = MassSpringDamperChain()
    N = 5
    prob = unconstrained_problem(model, N)
    prob.H_rows = np.zeros((1, 6))
    prob.H_rows[0, 0] = 1.0
    prob.margins = 0.5 * np.ones((N, 1))
    z_bad = np.zeros(6)
    z_bad[0] = 1.0  # h^T z = 1 > 0.5 at the fixed stage 0
    sol = solve_ocp(prob, z_bad, z_bad)
    assert sol.status is OcpStatus.INFEASIBLE


def test_ocp_chains_coincide_when_states_equal():
    model = MassSpringDamperChain()
    prob = unconstrained_problem(model, 10)
    x0 = np.array([0.1, -0.2, 0.4, 0.0, 0.3, -0.1])
    sol = solve_ocp(prob, x0, x0)
    assert sol.solved
    assert np.array_equal(sol.z_chain, sol.xbar_chain)


def test_ocp_z_chain_rolls_exactly_from_inputs():
    model = MassSpringDamperChain()
    prob = unconstrained_problem(model, 10)
    x0 = np.array([0.0, 0.1, 0.5, 0.0, 0.0, 0.2])
    z0 = x0 + 0.01
    sol = solve_ocp(prob, x0, z0)
    assert sol.solved
    np.testing.assert_array_equal(sol.z_chain, roll_chain(model, z0, sol.u))
    np.testing.assert_array_equal(sol.xbar_chain, roll_chain(model, x0, sol.u))


def test_shift_candidate_definition():
    u = np.array([[1.0], [2.0], [3.0]])
    shifted = shift_candidate(u)
    np.testing.assert_array_equal(shifted, np.array([[2.0], [3.0], [0.0]]))


def test_shift_candidate_reproduces_z_chain():
    model = MassSpringDamperChain()
    prob = unconstrained_problem(model, 6)
    x0 = np.array([0.0, 0.0, 2.0, 0.0, 0.0, 0.0])
    sol = solve_ocp(prob, x0, x0)
    assert sol.solved
    shifted = shift_candidate(sol)
    # rolling from z1 under the shifted tail reproduces z2..zN exactly
    z_next = roll_chain(model, sol.z_chain[1], shifted[: prob.N - 1])
    np.testing.assert_allclose(z_next, sol.z_chain[1:], rtol=0, atol=1e-12)


def test_lagrangian_gradient_matches_fd():
    model = MassSpringDamperChain()
    N = 7
    prob = unconstrained_problem(model, N)
    rng = np.random.default_rng(12)
    for _ in range(5):
        x0 = rng.normal(size=6)
        u = rng.normal(size=(N, 1)) * 10
        grad = rollout_cost_gradient(prob, x0, u)
        h = 1e-5
        for idx in [(0, 0), (N // 2, 0), (N - 1, 0)]:
            up, um = u.copy(), u.copy()
            up[idx] += h
            um[idx] -= h
            Jp = trajectory_cost(prob, roll_chain(model, x0, up), up)
            Jm = trajectory_cost(prob, roll_chain(model, x0, um), um)
            fd = (Jp - Jm) / (2 * h)
            rel = abs(grad[idx] - fd) / max(1.0, abs(fd))
            assert rel <= 1e-4


def test_ocp_respects_input_box():
    model = MassSpringDamperChain()
    N = 10
    prob = unconstrained_problem(model, N)
    prob.u_min = np.array([-5.0])
    prob.u_max = np.array([5.0])
    x0 = np.array([0.0, 0.0, 8.0, 0.0, 0.0, 0.0])
    sol = solve_ocp(prob, x0, x0)
    assert sol.solved
    assert np.all(sol.u >= -5.0 - 1e-10)
    assert np.all(sol.u <= 5.0 + 1e-10)
    # the box binds for this initial condition
    assert np.abs(sol.u).max() == pytest.approx(5.0, abs=1e-8)


def test_diag_log_written(tmp_path):
    model = MassSpringDamperChain()
    prob = unconstrained_problem(model, 6)
    x0 = np.array([0.0, 0.0, 3.0, 0.0, 0.0, 0.0])
    log = tmp_path / "diag.csv"
    sol = solve_ocp(prob, x0, x0, diag_log=str(log))
    assert sol.solved
    lines = log.read_text().strip().split("\n")
    assert lines[0] == "# schema=1"
    assert lines[1] == "iteration,merit,kkt_residual,step_norm"
    assert len(lines) >= 3
