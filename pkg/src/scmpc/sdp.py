"""Dense semidefinite programming by a primal log-det barrier method.

Solves   minimize    c^T y
         subject to  F0_b + sum_i y_i F_{b,i}  >= 0   (PSD, per block b)

Problems here are small (a few hundred scalar variables, total block
dimension of a couple hundred), so everything is dense NumPy and the
path-following schedule is a plain short-step scheme: center with damped
Newton, multiply the path parameter, repeat until the barrier duality gap
m/t is below the objective tolerance.

Infeasibility is detected heuristically through a phase-1 problem that
minimizes the smallest eigenvalue shift s with blocks S_b(y) + s I >= 0:
if s cannot be pushed below zero the problem is reported Infeasible.
Callers running a bisection treat Infeasible and MaxIterations alike.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from enum import Enum

import numpy as np


class SdpStatus(Enum):
    OPTIMAL = "Optimal"
    INFEASIBLE = "Infeasible"
    MAX_ITERATIONS = "MaxIterations"


@dataclass
class SdpProblem:
    """Linear objective over an intersection of LMI blocks.

    blocks[b] = (F0, Fs) with F0 of shape (nb, nb) and Fs of shape
    (d, nb, nb); all matrices symmetric.
    """

    c: np.ndarray
    blocks: list = field(default_factory=list)

    def __post_init__(self):
        self.c = np.asarray(self.c, dtype=float)
        checked = []
        for F0, Fs in self.blocks:
            F0 = np.asarray(F0, dtype=float)
            Fs = np.asarray(Fs, dtype=float)
            if Fs.ndim == 2:  # allow a single coefficient matrix when d == 1
                Fs = Fs[None, :, :]
            if Fs.shape[0] != self.d or F0.shape != Fs.shape[1:]:
                raise ValueError("inconsistent block shapes")
            if not np.allclose(F0, F0.T, atol=1e-12):
                raise ValueError("F0 not symmetric")
            if not np.allclose(Fs, np.transpose(Fs, (0, 2, 1)), atol=1e-12):
                raise ValueError("coefficient matrices not symmetric")
            checked.append((0.5 * (F0 + F0.T), 0.5 * (Fs + np.transpose(Fs, (0, 2, 1)))))
        self.blocks = checked

    @property
    def d(self):
        return self.c.shape[0]

    @property
    def total_block_dim(self):
        return sum(F0.shape[0] for F0, _ in self.blocks)

    def residual_matrices(self, y):
        return [F0 + np.tensordot(y, Fs, axes=1) for F0, Fs in self.blocks]

    def min_eigenvalues(self, y):
        """Post-hoc feasibility check with an independent symmetric solve."""
        return np.array([np.linalg.eigvalsh(S).min() for S in self.residual_matrices(y)])


@dataclass
class SdpSolution:
    y: np.ndarray
    objective: float
    block_min_eig: np.ndarray
    status: SdpStatus
    newton_iters: int = 0

    @property
    def optimal(self):
        return self.status is SdpStatus.OPTIMAL


def _barrier_value(blocks, y):
    """-sum_b log det S_b(y), or None outside the domain (value only)."""
    val = 0.0
    for F0, Fs in blocks:
        S = F0 + np.tensordot(y, Fs, axes=1)
        try:
            L = np.linalg.cholesky(S)
        except np.linalg.LinAlgError:
            return None
        val -= 2.0 * np.sum(np.log(np.diag(L)))
    return val


def _barrier_terms(blocks, y):
    """Value, gradient and Hessian of -sum_b log det S_b(y).

    Returns None when y is outside the barrier domain.
    """
    val = 0.0
    d = y.shape[0]
    grad = np.zeros(d)
    hess = np.zeros((d, d))
    for F0, Fs in blocks:
        S = F0 + np.tensordot(y, Fs, axes=1)
        try:
            L = np.linalg.cholesky(S)
        except np.linalg.LinAlgError:
            return None
        val -= 2.0 * np.sum(np.log(np.diag(L)))
        # V_i = L^-1 F_i L^-T ; gradient -tr(V_i), Hessian <V_i, V_j>
        A = np.linalg.solve(L, Fs)
        V = np.transpose(np.linalg.solve(L, np.transpose(A, (0, 2, 1))), (0, 2, 1))
        grad -= np.trace(V, axis1=1, axis2=2)
        hess += np.tensordot(V, V, axes=([1, 2], [2, 1]))
    return val, grad, hess


def _center(blocks, c_eff, y, t, newton_budget=100, early_exit=None):
    """Damped Newton on t*c_eff^T y + barrier(y).  Returns (y, used, ok)."""
    used = 0
    while used < newton_budget:
        terms = _barrier_terms(blocks, y)
        if terms is None:
            return y, used, False
        val, grad, hess = terms
        g = t * c_eff + grad
        # tiny Tikhonov guard keeps the solve well-posed near flat directions
        reg = 1e-12 * (1.0 + np.trace(hess) / max(1, hess.shape[0]))
        try:
            dy = np.linalg.solve(hess + reg * np.eye(hess.shape[0]), -g)
        except np.linalg.LinAlgError:
            return y, used, False
        lam2 = float(-g @ dy)
        if lam2 < 0:
            dy = -dy
            lam2 = -lam2
        used += 1
        # backtracking: stay in the domain, then Armijo on the centering obj
        psi0 = t * (c_eff @ y) + val
        alpha = 1.0
        accepted = False
        for _ in range(60):
            y_new = y + alpha * dy
            val_new = _barrier_value(blocks, y_new)
            if val_new is not None:
                psi_new = t * (c_eff @ y_new) + val_new
                if psi_new <= psi0 - 1e-4 * alpha * lam2:
                    accepted = True
                    break
            alpha *= 0.5
        if not accepted:
            return y, used, lam2 <= 1e-8
        y = y_new
        if early_exit is not None and early_exit(y):
            return y, used, True
        if lam2 / 2.0 <= 1e-10:
            return y, used, True
    return y, used, False


def _path_follow(blocks, c_eff, y0, m_total, tol_gap, stage_budget, early_exit=None,
                 lower_cert=None, mu=10.0, trace=None, phase=""):
    """Standard barrier path following.

    stage_budget caps the number of outer centering stages; returns
    (y, stages_used, newton_used, converged).  After each centering the
    point is within m_total/t of optimal, so `lower_cert(y, gap)` may stop
    the path early once the implied lower bound settles a decision.
    """
    y = np.array(y0, dtype=float)
    stages = 0
    newton = 0
    # c_eff is unit-norm; balancing t against the barrier gradient keeps the
    # first centering target near the current point
    terms = _barrier_terms(blocks, y)
    if terms is None:
        return y, stages, newton, False
    t = max(1.0, float(np.linalg.norm(terms[1])))
    while stages < stage_budget:
        stages += 1
        y, it, ok = _center(blocks, c_eff, y, t, early_exit=early_exit)
        newton += it
        if trace is not None:
            trace.append((phase, stages, t, float(c_eff @ y), it))
        if early_exit is not None and early_exit(y):
            return y, stages, newton, True
        if not ok:
            return y, stages, newton, False
        gap = m_total / t
        if lower_cert is not None and lower_cert(y, gap):
            return y, stages, newton, True
        if gap <= tol_gap:
            return y, stages, newton, True
        t *= mu
    return y, stages, newton, m_total / t <= tol_gap


def solve_sdp(prob: SdpProblem, tol_psd=1e-8, tol_obj=1e-7, max_iter=200,
              phase1_box=1e4, iterate_log=None) -> SdpSolution:
    """Solve the SDP; see module docstring for the algorithm.

    max_iter caps the number of outer centering stages across phase 1 and
    phase 2; each stage runs an internally-capped damped Newton loop.
    phase1_box bounds coordinates during the feasibility phase (the phase-1
    problem minimizes only the slack, so without a box its analytic center
    need not exist); feasible points are expected well inside it.
    iterate_log, when given a path, receives one CSV row per centering
    stage (phase, stage, path parameter, objective, Newton steps).
    """
    d = prob.d
    m_total = prob.total_block_dim
    stages = 0
    newton = 0
    trace = [] if iterate_log is not None else None

    def _dump():
        if trace is None:
            return
        with open(iterate_log, "w") as fh:
            fh.write("# schema=1\nphase,stage,t,objective,newton_steps\n")
            for ph, st, t, obj, it in trace:
                fh.write(f"{ph},{st},{t!r},{obj!r},{it}\n")

    # --- phase 1: strictly feasible start ------------------------------
    y = np.zeros(d)
    min_eig0 = prob.min_eigenvalues(y) if prob.blocks else np.array([1.0])
    slack_needed = -min_eig0.min()
    if slack_needed >= -1e-10:
        # augment with s: blocks S_b(y) + s I >= 0, minimize s
        scale = max(1.0, slack_needed)
        aug_blocks = []
        for F0, Fs in prob.blocks:
            nb = F0.shape[0]
            Fs_aug = np.concatenate([Fs, np.eye(nb)[None, :, :]], axis=0)
            aug_blocks.append((F0, Fs_aug))
        # coordinate box |y_i| <= phase1_box keeps the phase-1 barrier
        # bounded in directions the slack objective does not control
        for i in range(d):
            for sgn in (1.0, -1.0):
                F0b = np.array([[phase1_box]])
                Fsb = np.zeros((d + 1, 1, 1))
                Fsb[i, 0, 0] = sgn
                aug_blocks.append((F0b, Fsb))
        c_aug = np.zeros(d + 1)
        c_aug[-1] = 1.0
        y_aug = np.zeros(d + 1)
        y_aug[-1] = slack_needed + scale

        # stop as soon as the slack is comfortably negative; thin feasible
        # sets are still accepted if phase 1 converges below zero
        exit_margin = 1e-4 * scale

        def deep_enough(ya):
            return ya[-1] < -exit_margin

        def provably_positive(ya, gap):
            # centered point is within `gap` of the optimal slack, so a
            # strictly positive lower bound certifies infeasibility
            return ya[-1] - gap > 1e-12 * scale

        y_aug, st, it, ok = _path_follow(
            aug_blocks, c_aug, y_aug, m_total + 2 * d, 1e-9 * scale, max_iter,
            early_exit=deep_enough, lower_cert=provably_positive,
            trace=trace, phase="feasibility",
        )
        stages += st
        newton += it
        strictly_inside = y_aug[-1] < 0 and prob.min_eigenvalues(y_aug[:d]).min() > 0
        if not strictly_inside:
            _dump()
            status = SdpStatus.INFEASIBLE if ok else SdpStatus.MAX_ITERATIONS
            return SdpSolution(
                y=y_aug[:d],
                objective=float(prob.c @ y_aug[:d]),
                block_min_eig=prob.min_eigenvalues(y_aug[:d]),
                status=status,
                newton_iters=newton,
            )
        y = y_aug[:d]

    # --- phase 2: minimize the true objective --------------------------
    # work with a unit-norm objective so the gap target is scale-free
    cnorm = float(np.linalg.norm(prob.c))
    c_unit = prob.c / cnorm if cnorm > 0 else prob.c
    gap_target = 0.25 * tol_obj / max(cnorm, 1e-30)
    y, st, it, ok = _path_follow(prob.blocks, c_unit, y, m_total, gap_target,
                                 max_iter - stages, trace=trace, phase="objective")
    newton += it
    _dump()

    min_eig = prob.min_eigenvalues(y)
    feasible = min_eig.min() >= -tol_psd
    status = SdpStatus.OPTIMAL if (ok and feasible) else SdpStatus.MAX_ITERATIONS
    return SdpSolution(
        y=y,
        objective=float(prob.c @ y),
        block_min_eig=min_eig,
        status=status,
        newton_iters=newton,
    )


# ---------------------------------------------------------------------------
# helpers for assembling LMIs over symmetric-matrix variables


def sym_basis(n):
    """Basis E_k of symmetric n x n matrices matching sym_to_vec ordering."""
    basis = []
    for i in range(n):
        for j in range(i, n):
            E = np.zeros((n, n))
            if i == j:
                E[i, i] = 1.0
            else:
                E[i, j] = E[j, i] = 1.0
            basis.append(E)
    return basis


def sym_to_vec(S):
    n = S.shape[0]
    return np.array([S[i, j] for i in range(n) for j in range(i, n)])


def vec_to_sym(v, n):
    S = np.zeros((n, n))
    k = 0
    for i in range(n):
        for j in range(i, n):
            S[i, j] = S[j, i] = v[k]
            k += 1
    return S
