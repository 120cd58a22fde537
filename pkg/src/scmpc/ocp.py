"""Receding-horizon optimal control problem and its SQP solver.

The problem couples two state chains driven by one input sequence: a
nominal chain z (initialized at the controller's internal nominal state)
that carries all state constraints, and a certainty-equivalent chain xbar
(initialized at the measured state) that carries the quadratic cost.

Transcription is multiple shooting: both chains' states are iterates with
shooting defects, linearized each iteration; the step computation condenses
the linearized chains onto the input increments, leaving a small strictly
convex QP solved by the dual active-set method.  Globalization is an l1
exact-penalty merit with backtracking; if the step QP is infeasible an
elastic restoration QP decides between progress and local infeasibility.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from enum import Enum

import numpy as np

from .qp import QpStatus, solve_qp_ineq


class OcpStatus(Enum):
    SOLVED = "Solved"
    INFEASIBLE = "Infeasible"
    MAX_ITERATIONS = "MaxIterations"


@dataclass
class OcpProblem:
    """Data for one horizon-N solve; margins are for absolute steps
    k..k+N-1 (tightening depends on absolute time, not stage offset)."""

    model: object
    N: int
    Q: np.ndarray
    R: np.ndarray
    P: np.ndarray
    H_rows: np.ndarray          # (p, n) polytope rows, h^T z <= margin
    margins: np.ndarray         # (N, p)
    M_term: np.ndarray          # terminal ellipsoid metric
    alpha_f: float
    u_min: np.ndarray
    u_max: np.ndarray
    tol_kkt: float = 1e-6
    tol_con: float = 1e-8
    max_sqp_iter: int = 100

    def __post_init__(self):
        for name in ("Q", "R", "P", "H_rows", "margins", "M_term", "u_min", "u_max"):
            setattr(self, name, np.asarray(getattr(self, name), dtype=float))
        if self.N < 1:
            raise ValueError("horizon must be at least 1")
        if self.margins.shape != (self.N, self.H_rows.shape[0]):
            raise ValueError("margins must be (N, n_rows)")


@dataclass
class OcpSolution:
    u: np.ndarray               # (N, m)
    z_chain: np.ndarray         # (N+1, n), re-rolled exactly from u
    xbar_chain: np.ndarray      # (N+1, n), re-rolled exactly from u
    objective: float
    kkt_residual: float
    max_violation: float
    status: OcpStatus
    sqp_iters: int = 0
    active_set: tuple = ()      # last QP active set, reusable as warm guess

    @property
    def solved(self):
        return self.status is OcpStatus.SOLVED


def roll_chain(model, x0, u_seq):
    """Exact nominal rollout; returns (len(u_seq)+1, n) states."""
    out = np.empty((len(u_seq) + 1, model.n))
    out[0] = x0
    for i, ui in enumerate(u_seq):
        out[i + 1] = model.f_nom(out[i], ui)
    return out


def _roll_pair(model, z0, x0, u_seq):
    """Roll the z- and xbar-chains together (one batched call per stage).

    Row 0 is the z-chain; identical inputs and dynamics mean the result is
    bitwise equal to two separate roll_chain calls.
    """
    if not hasattr(model, "f_nom_batch"):
        return roll_chain(model, z0, u_seq), roll_chain(model, x0, u_seq)
    N = len(u_seq)
    out = np.empty((2, N + 1, model.n))
    out[0, 0] = z0
    out[1, 0] = x0
    for i in range(N):
        out[:, i + 1] = model.f_nom_batch(out[:, i], np.broadcast_to(u_seq[i], (2, model.m)))
    return out[0], out[1]


def trajectory_cost(prob, xbar_chain, u_seq):
    X = xbar_chain[: prob.N]
    J = float(np.einsum("ia,ab,ib->", X, prob.Q, X))
    J += float(np.einsum("ia,ab,ib->", u_seq, prob.R, u_seq))
    xN = xbar_chain[prob.N]
    return J + float(xN @ prob.P @ xN)


def rollout_cost_gradient(prob, x_k, u_seq):
    """dJ/du of the rolled-out certainty-equivalent cost, by adjoint.

    This equals the Lagrangian gradient of the multiple-shooting problem
    with respect to the inputs at a dynamics-feasible point.
    """
    model = prob.model
    N = prob.N
    xs = roll_chain(model, x_k, u_seq)
    lam = 2.0 * prob.P @ xs[N]
    grad = np.zeros((N, model.m))
    for i in reversed(range(N)):
        A = model.jacobian(xs[i], u_seq[i])
        B = model.input_jacobian(xs[i], u_seq[i])
        grad[i] = 2.0 * prob.R @ u_seq[i] + B.T @ lam
        lam = 2.0 * prob.Q @ xs[i] + A.T @ lam
    return grad


def shift_candidate(prev, u_f=None):
    """Shift the previous optimal sequence one step, appending u_f.

    This is the guaranteed-feasible warm start of the receding-horizon
    feasibility argument (terminal invariance supplies the appended input).
    """
    u_prev = prev.u if isinstance(prev, OcpSolution) else np.asarray(prev, dtype=float)
    m = u_prev.shape[1]
    tail = np.zeros((1, m)) if u_f is None else np.asarray(u_f, dtype=float).reshape(1, m)
    return np.vstack([u_prev[1:], tail])


def _f_batch(model, states, u_seq):
    """Nominal map along a horizon: states (N, n), u_seq (N, m) -> (N, n)."""
    if hasattr(model, "f_nom_batch"):
        return model.f_nom_batch(np.asarray(states), np.asarray(u_seq))
    return np.array([model.f_nom(states[i], u_seq[i]) for i in range(len(u_seq))])


def _jac_batch(model, states, u_seq):
    if hasattr(model, "jacobian_batch"):
        return (
            model.jacobian_batch(np.asarray(states), np.asarray(u_seq)),
            model.input_jacobian_batch(np.asarray(states), np.asarray(u_seq)),
        )
    N = len(u_seq)
    A = np.array([model.jacobian(states[i], u_seq[i]) for i in range(N)])
    B = np.array([model.input_jacobian(states[i], u_seq[i]) for i in range(N)])
    return A, B


def _sensitivities_pair(Az, Bz, defz, Ax, Bx, defx, n, m, N):
    """Sensitivities of both chains with one batched recursion.

    The defect propagation rides along as an extra column of S, so the
    whole per-stage update is a single batched matmul.
    """
    D = N * m
    S = np.zeros((2, N + 1, n, D + 1))
    A2 = np.stack([Az, Ax], axis=0)  # (2, N, n, n)
    B2 = np.stack([Bz, Bx], axis=0)
    d2 = np.stack([defz, defx], axis=0)
    for i in range(N):
        S[:, i + 1] = A2[:, i] @ S[:, i]
        S[:, i + 1, :, i * m:(i + 1) * m] += B2[:, i]
        S[:, i + 1, :, D] += d2[:, i]
    return S[0, :, :, D], S[0, :, :, :D], S[1, :, :, D], S[1, :, :, :D]


def _constraint_rows(prob, Zs, Ez, Sz):
    """Linearized z-chain inequality rows C du <= r at the current iterate."""
    N, m = prob.N, prob.model.m
    D = N * m
    H = prob.H_rows
    p = H.shape[0]
    if N > 1:
        C_stage = np.einsum("ra,iad->ird", H, Sz[1:N]).reshape((N - 1) * p, D)
        r_stage = (prob.margins[1:] - (Zs[1:N] + Ez[1:N]) @ H.T).reshape(-1)
    else:
        C_stage = np.zeros((0, D))
        r_stage = np.zeros(0)
    zN = Zs[prob.N]
    vec = 2.0 * prob.M_term @ zN
    C = np.vstack([C_stage, (vec @ Sz[prob.N])[None, :]])
    r = np.concatenate(
        [r_stage, [prob.alpha_f - zN @ prob.M_term @ zN - vec @ Ez[prob.N]]]
    )
    return C, r


def _input_box_rows(prob, u_seq):
    N, m = prob.N, prob.model.m
    D = N * m
    I = np.eye(D)
    upper = np.tile(prob.u_max, N) - u_seq.reshape(-1)
    lower = u_seq.reshape(-1) - np.tile(prob.u_min, N)
    return np.vstack([I, -I]), np.concatenate([upper, lower])


def _violation(prob, Zs, u_seq, defz=None, defx=None):
    """Worst infeasibility of the current iterate (chains + constraints)."""
    v = float((Zs[: prob.N] @ prob.H_rows.T - prob.margins).max())
    zN = Zs[prob.N]
    v = max(v, float(zN @ prob.M_term @ zN - prob.alpha_f))
    v = max(v, float((u_seq - prob.u_max[None, :]).max()))
    v = max(v, float((prob.u_min[None, :] - u_seq).max()))
    if defz is not None:
        v = max(v, float(np.abs(defz).max()))
    if defx is not None:
        v = max(v, float(np.abs(defx).max()))
    return v


def _violation_l1(prob, Zs, u_seq, defz, defx):
    tot = float(np.abs(defz).sum() + np.abs(defx).sum())
    tot += float(np.clip(Zs[1: prob.N] @ prob.H_rows.T - prob.margins[1:], 0.0, None).sum())
    zN = Zs[prob.N]
    tot += max(0.0, float(zN @ prob.M_term @ zN - prob.alpha_f))
    tot += float(np.clip(u_seq - prob.u_max[None, :], 0.0, None).sum())
    tot += float(np.clip(prob.u_min[None, :] - u_seq, 0.0, None).sum())
    return tot


def _restoration_step(H_red, g_red, C_soft, r_soft, C_hard, r_hard):
    """Elastic QP with one shared slack on the z-chain rows.

    min 1/2 du' H du + g' du + w s (+ tiny s^2)  s.t.  C_soft du <= r + s,
    s >= 0, hard (input box) rows kept exact.  Feasible by construction;
    the optimal slack measures how infeasible the linearized problem is.
    Returns (du, slack) or (None, inf) if even this solve breaks down.
    """
    D = H_red.shape[0]
    w = 1e4 * (1.0 + float(np.abs(g_red).max()))
    G = np.zeros((D + 1, D + 1))
    G[:D, :D] = H_red
    G[D, D] = 1e-6 * w
    a = np.concatenate([g_red, [w]])
    C = np.zeros((len(r_soft) + 1 + len(r_hard), D + 1))
    C[: len(r_soft), :D] = C_soft
    C[: len(r_soft), D] = -1.0
    C[len(r_soft), D] = -1.0
    C[len(r_soft) + 1:, :D] = C_hard
    r = np.concatenate([r_soft, [0.0], r_hard])
    sol = solve_qp_ineq(G, a, C, r, max_iter=200 + 10 * len(r))
    if sol.status is not QpStatus.OPTIMAL:
        return None, np.inf
    return sol.x[:D], float(sol.x[D])


def solve_ocp(prob: OcpProblem, x_k, z_k, warm=None, warm_active=(),
              diag_log=None) -> OcpSolution:
    """SQP on the two-chain multiple-shooting transcription.

    The cost is evaluated on the xbar-chain only; constraints bind the
    z-chain only.  On success the returned chains are re-rolled exactly
    from the optimized inputs.  warm/warm_active seed the input sequence
    and the first QP's active set (e.g. from the previous receding step).
    diag_log, when given a path or file object, receives one CSV row per
    iteration with the merit value, KKT residual and step norm.
    """
    model = prob.model
    n, m, N = model.n, model.m, prob.N
    D = N * m
    x_k = np.asarray(x_k, dtype=float)
    z_k = np.asarray(z_k, dtype=float)

    # stage-0 constraint is an equality-fixed quantity: infeasible now or never
    if (prob.H_rows @ z_k - prob.margins[0]).max() > prob.tol_con:
        return OcpSolution(
            u=np.zeros((N, m)), z_chain=roll_chain(model, z_k, np.zeros((N, m))),
            xbar_chain=roll_chain(model, x_k, np.zeros((N, m))),
            objective=np.inf, kkt_residual=np.inf,
            max_violation=float((prob.H_rows @ z_k - prob.margins[0]).max()),
            status=OcpStatus.INFEASIBLE,
        )

    u_seq = np.zeros((N, m)) if warm is None else np.array(warm, dtype=float).reshape(N, m)
    u_seq = np.clip(u_seq, prob.u_min[None, :], prob.u_max[None, :])
    Zs, Xs = _roll_pair(model, z_k, x_k, u_seq)

    nu = 1.0
    status = OcpStatus.MAX_ITERATIONS
    kkt_res = np.inf
    it_done = 0
    active_prev = tuple(warm_active)
    R2 = 2.0 * prob.R
    log_rows = [] if diag_log is not None else None
    # stage weights for the condensed objective: Q at 1..N-1, P at N
    W_stack = np.repeat(prob.Q[None, :, :], N, axis=0)
    W_stack[-1] = prob.P
    fz = _f_batch(model, Zs[:-1], u_seq)
    fx = _f_batch(model, Xs[:-1], u_seq)

    for it in range(prob.max_sqp_iter):
        it_done = it + 1
        Az, Bz = _jac_batch(model, Zs[:-1], u_seq)
        Ax, Bx = _jac_batch(model, Xs[:-1], u_seq)
        defz = fz - Zs[1:]
        defx = fx - Xs[1:]
        Ez, Sz, Ex, Sx = _sensitivities_pair(Az, Bz, defz, Ax, Bx, defx, n, m, N)

        # reduced Gauss-Newton objective over du (BLAS-shaped contractions)
        WS = np.matmul(W_stack, Sx[1:])
        H_red = 2.0 * np.tensordot(Sx[1:], WS, axes=([0, 1], [0, 1]))
        g_red = 2.0 * np.einsum("iad,ia->d", WS, Xs[1:] + Ex[1:])
        for i in range(N):
            sl = slice(i * m, (i + 1) * m)
            H_red[sl, sl] += R2
            g_red[sl] += R2 @ u_seq[i]
        H_red = 0.5 * (H_red + H_red.T)

        C_soft, r_soft = _constraint_rows(prob, Zs, Ez, Sz)
        C_hard, r_hard = _input_box_rows(prob, u_seq)
        C_all = np.vstack([C_soft, C_hard])
        r_all = np.concatenate([r_soft, r_hard])

        qp = solve_qp_ineq(H_red, g_red, C_all, r_all, max_iter=100 + 10 * len(r_all),
                           warm_active=active_prev)
        if qp.status is QpStatus.OPTIMAL:
            du = qp.x
            mu = qp.mu
            active_prev = qp.active
            # Lagrangian stationarity of the current iterate with the QP
            # multipliers equals H du; scale by the gradient magnitude
            kkt_res = float(np.abs(H_red @ du).max()) / max(1.0, float(np.abs(g_red).max()))
        else:
            # restoration: the elastic problem is always solvable, and its
            # slack says whether the linearized constraints were consistent
            du, slack = _restoration_step(H_red, g_red, C_soft, r_soft, C_hard, r_hard)
            stalled = du is None or float(np.abs(du).max(initial=0.0)) <= 1e-9 * (
                1.0 + float(np.abs(u_seq).max())
            )
            if du is None or (slack > 1e-6 and stalled):
                return OcpSolution(
                    u=u_seq, z_chain=roll_chain(model, z_k, u_seq),
                    xbar_chain=roll_chain(model, x_k, u_seq),
                    objective=trajectory_cost(prob, roll_chain(model, x_k, u_seq), u_seq),
                    kkt_residual=kkt_res,
                    max_violation=_violation(prob, Zs, u_seq, defz, defx),
                    status=OcpStatus.INFEASIBLE, sqp_iters=it_done,
                )
            mu = np.zeros(len(r_all))
            kkt_res = np.inf

        viol_now = _violation(prob, Zs, u_seq, defz, defx)
        if log_rows is not None:
            merit = trajectory_cost(prob, Xs, u_seq) + nu * _violation_l1(
                prob, Zs, u_seq, defz, defx)
            log_rows.append((it_done, merit, kkt_res,
                             float(np.abs(du).max(initial=0.0))))
        if kkt_res <= prob.tol_kkt and viol_now <= prob.tol_con:
            status = OcpStatus.SOLVED
            break

        # l1 merit line search on the combined primal step
        dZ = Ez + Sz @ du
        dX = Ex + Sx @ du
        nu = max(nu, 2.0 * float(np.abs(mu).max(initial=0.0)) + 1.0)
        J0 = trajectory_cost(prob, Xs, u_seq)
        v1_0 = _violation_l1(prob, Zs, u_seq, defz, defx)
        step_norm = float(np.abs(du).max(initial=0.0))
        accepted = False
        for _ in range(5):  # penalty escalation when infeasible steps stall
            phi0 = J0 + nu * v1_0
            alpha = 1.0
            for _ in range(30):
                u_t = u_seq + alpha * du.reshape(N, m)
                Z_t = Zs + alpha * dZ
                X_t = Xs + alpha * dX
                fz_t = _f_batch(model, Z_t[:-1], u_t)
                fx_t = _f_batch(model, X_t[:-1], u_t)
                defz_t = fz_t - Z_t[1:]
                defx_t = fx_t - X_t[1:]
                J_t = trajectory_cost(prob, X_t, u_t)
                v1_t = _violation_l1(prob, Z_t, u_t, defz_t, defx_t)
                phi_t = J_t + nu * v1_t
                if phi_t <= phi0 - 1e-8 * alpha * max(step_norm, 1e-12):
                    accepted = True
                    break
                # filter-style fallback avoids the Maratos effect: accept
                # steps collapsing infeasibility at a cost rise of its order
                if v1_t <= 0.5 * v1_0 and J_t <= J0 + 10.0 * nu * v1_0:
                    accepted = True
                    break
                alpha *= 0.5
            if accepted or v1_0 <= prob.tol_con:
                break
            nu *= 10.0
        if not accepted:
            # steps too small for the merit test to resolve: judge by KKT
            if kkt_res <= prob.tol_kkt and viol_now <= prob.tol_con:
                status = OcpStatus.SOLVED
            break
        u_seq, Zs, Xs = u_t, Z_t, X_t
        fz, fx = fz_t, fx_t
        if step_norm <= 1e-11 * (1.0 + float(np.abs(u_seq).max())):
            if viol_now <= prob.tol_con and kkt_res <= prob.tol_kkt:
                status = OcpStatus.SOLVED
            break

    if log_rows is not None:
        own = isinstance(diag_log, (str, bytes)) or hasattr(diag_log, "__fspath__")
        fh = open(diag_log, "w") if own else diag_log
        try:
            fh.write("# schema=1\niteration,merit,kkt_residual,step_norm\n")
            for row in log_rows:
                fh.write(f"{row[0]},{row[1]!r},{row[2]!r},{row[3]!r}\n")
        finally:
            if own:
                fh.close()

    # exact re-roll from the optimized inputs
    Zr = roll_chain(model, z_k, u_seq)
    Xr = roll_chain(model, x_k, u_seq)
    viol = _violation(prob, Zr, u_seq)
    if status is OcpStatus.SOLVED and viol > prob.tol_con:
        status = OcpStatus.MAX_ITERATIONS
    return OcpSolution(
        u=u_seq, z_chain=Zr, xbar_chain=Xr,
        objective=trajectory_cost(prob, Xr, u_seq),
        kkt_residual=kkt_res, max_violation=viol,
        status=status, sqp_iters=it_done, active_set=tuple(active_prev),
    )
