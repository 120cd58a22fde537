"""Dense convex quadratic programming for the SQP inner subproblems.

The core is a dual active-set method (Goldfarb-Idnani style) for strictly
convex inequality-constrained QPs: it starts from the unconstrained
minimizer, activates the most violated constraint, and takes combined
primal/dual steps that keep multipliers nonnegative, so no feasible
starting point is needed and infeasibility shows up as an unbounded dual
step.  Equality constraints are eliminated through a null-space basis.
"""

from __future__ import annotations

from dataclasses import dataclass
from enum import Enum

import numpy as np


class QpStatus(Enum):
    OPTIMAL = "Optimal"
    INFEASIBLE = "Infeasible"
    MAX_ITERATIONS = "MaxIterations"


@dataclass
class QpSolution:
    x: np.ndarray
    mu: np.ndarray       # inequality multipliers, >= 0
    lam: np.ndarray      # equality multipliers
    status: QpStatus
    iterations: int = 0
    active: tuple = ()   # final active set (row indices)


def _warm_active_set(G, a, C, d, active0, tol=1e-10, max_iter=40):
    """Primal-dual active-set iteration seeded with a guessed active set.

    Cheap when the guess is nearly right (one KKT solve per change); returns
    None on cycling/singularity so the caller can fall back to the dual
    method, which is the provably terminating one.
    """
    n = G.shape[0]
    m = C.shape[0]
    active = [i for i in dict.fromkeys(active0) if 0 <= i < m]
    scale = 1.0 + np.abs(d)
    for _ in range(max_iter):
        k = len(active)
        try:
            if k == 0:
                x = np.linalg.solve(G, -a)
                mu_act = np.zeros(0)
            else:
                Ca = C[active]
                kkt = np.block([[G, Ca.T], [Ca, np.zeros((k, k))]])
                sol = np.linalg.solve(kkt, np.concatenate([-a, d[active]]))
                x = sol[:n]
                mu_act = sol[n:]
        except np.linalg.LinAlgError:
            return None
        if k and mu_act.min() < -tol:
            active.pop(int(np.argmin(mu_act)))
            continue
        viol = (C @ x - d) / scale
        if k:
            viol[active] = -np.inf
        p = int(np.argmax(viol))
        if viol[p] <= tol:
            mu = np.zeros(m)
            for i, ai in enumerate(active):
                mu[ai] = max(mu_act[i], 0.0)
            return QpSolution(x=x, mu=mu, lam=np.zeros(0),
                              status=QpStatus.OPTIMAL, iterations=len(active),
                              active=tuple(active))
        active.append(p)
    return None


def solve_qp_ineq(G, a, C, d, tol=1e-10, max_iter=None, warm_active=None) -> QpSolution:
    """min 1/2 x^T G x + a^T x  s.t.  C x <= d, with G symmetric PD.

    Dual active-set iteration; returns multipliers satisfying
    G x + a + C^T mu = 0 with mu >= 0 at optimality.  A warm_active guess
    (e.g. the previous SQP iteration's active set) is tried first with a
    cheaper primal-dual sweep.
    """
    n = G.shape[0]
    m = 0 if C is None else C.shape[0]
    x = np.linalg.solve(G, -a)
    mu = np.zeros(m)
    active: list[int] = []
    if m == 0:
        return QpSolution(x=x, mu=mu, lam=np.zeros(0), status=QpStatus.OPTIMAL)

    # normalize rows: GI's degeneracy tests are scale-sensitive
    C = np.asarray(C, dtype=float)
    d = np.asarray(d, dtype=float)
    row_norm = np.linalg.norm(C, axis=1)
    row_norm = np.where(row_norm > 1e-300, row_norm, 1.0)
    C = C / row_norm[:, None]
    d = d / row_norm

    if warm_active:
        warm = _warm_active_set(G, a, C, d, warm_active, tol=tol)
        if warm is not None:
            warm.mu = warm.mu / row_norm
            return warm

    max_iter = max_iter or (50 + 10 * m)
    scale = 1.0 + np.abs(d)  # per-row feasibility scale
    it = 0
    while it < max_iter:
        it += 1
        viol = (C @ x - d) / scale
        viol[active] = -np.inf  # active rows are satisfied with equality
        p = int(np.argmax(viol))
        if viol[p] <= tol:
            return QpSolution(x=x, mu=mu / row_norm, lam=np.zeros(0),
                              status=QpStatus.OPTIMAL, iterations=it,
                              active=tuple(active))
        s_p = float(C[p] @ x - d[p])
        # inner loop: drive constraint p to activity, dropping blockers
        inner_guard = 0
        while True:
            inner_guard += 1
            if inner_guard > m + 2:
                return QpSolution(x=x, mu=mu / row_norm, lam=np.zeros(0),
                                  status=QpStatus.MAX_ITERATIONS, iterations=it)
            n_p = C[p]
            k = len(active)
            if k == 0:
                z = np.linalg.solve(G, n_p)
                r = np.zeros(0)
            else:
                # G z + N r = n_p, N^T z = 0: z is the projected primal
                # direction, r the dual adjustment of the active rows
                N = C[active].T  # (n, k)
                kkt = np.block([[G, N], [N.T, np.zeros((k, k))]])
                rhs = np.concatenate([n_p, np.zeros(k)])
                sol = np.linalg.solve(kkt, rhs)
                z = sol[:n]
                r = sol[n:]
            zn = float(z @ n_p)
            t2 = s_p / zn if zn > tol else np.inf
            if len(r) and np.any(r > tol):
                idx = [i for i in range(k) if r[i] > tol]
                ratios = [mu[active[i]] / r[i] for i in idx]
                j = idx[int(np.argmin(ratios))]
                t1 = mu[active[j]] / r[j]
            else:
                t1, j = np.inf, None
            t = min(t1, t2)
            if not np.isfinite(t):
                # no primal progress possible and no blocking multiplier:
                # the constraint set is inconsistent
                return QpSolution(x=x, mu=mu / row_norm, lam=np.zeros(0),
                                  status=QpStatus.INFEASIBLE, iterations=it)
            if np.isfinite(t2):
                x = x - t * z
            for i, ai in enumerate(active):
                mu[ai] -= t * r[i]
            mu[p] += t
            s_p -= t * zn
            if t == t2 or s_p <= tol * scale[p]:
                active.append(p)
                break
            # dual step hit zero on a blocking constraint: drop it
            dropped = active.pop(j)
            mu[dropped] = 0.0
    return QpSolution(x=x, mu=mu / row_norm, lam=np.zeros(0),
                      status=QpStatus.MAX_ITERATIONS, iterations=it)


def null_space(A, rcond=1e-12):
    """Orthonormal basis of ker(A) via QR of A^T."""
    m, n = A.shape
    q, r = np.linalg.qr(A.T, mode="complete")
    diag = np.abs(np.diag(r[: min(m, n), : min(m, n)])) if min(m, n) else np.array([])
    rank = int(np.sum(diag > rcond * (diag.max() if diag.size else 1.0)))
    return q[:, rank:]


def qp_solve(H, g, A_eq=None, b_eq=None, A_in=None, b_in=None, tol=1e-10) -> QpSolution:
    """General dense convex QP with equalities eliminated by null space.

    min 1/2 x^T H x + g^T x  s.t.  A_eq x = b_eq,  A_in x <= b_in.
    H must be PD on the null space of A_eq.
    """
    H = np.asarray(H, dtype=float)
    g = np.asarray(g, dtype=float)
    n = H.shape[0]
    if A_eq is None or A_eq.size == 0:
        x0 = np.zeros(n)
        Z = np.eye(n)
        A_eq = np.zeros((0, n))
    else:
        A_eq = np.atleast_2d(np.asarray(A_eq, dtype=float))
        b_eq = np.atleast_1d(np.asarray(b_eq, dtype=float))
        x0, *_ = np.linalg.lstsq(A_eq, b_eq, rcond=None)
        if np.abs(A_eq @ x0 - b_eq).max() > 1e-8 * (1.0 + np.abs(b_eq).max()):
            return QpSolution(x=x0, mu=np.zeros(0 if A_in is None else len(A_in)),
                              lam=np.zeros(A_eq.shape[0]), status=QpStatus.INFEASIBLE)
        Z = null_space(A_eq)

    G = Z.T @ H @ Z
    G = 0.5 * (G + G.T)
    a = Z.T @ (g + H @ x0)
    if A_in is None or len(A_in) == 0:
        y = np.linalg.solve(G, -a)
        x = x0 + Z @ y
        mu = np.zeros(0)
    else:
        A_in = np.atleast_2d(np.asarray(A_in, dtype=float))
        b_in = np.atleast_1d(np.asarray(b_in, dtype=float))
        sub = solve_qp_ineq(G, a, A_in @ Z, b_in - A_in @ x0, tol=tol)
        if sub.status is not QpStatus.OPTIMAL:
            return QpSolution(x=x0 + Z @ sub.x, mu=sub.mu,
                              lam=np.zeros(A_eq.shape[0]), status=sub.status,
                              iterations=sub.iterations)
        x = x0 + Z @ sub.x
        mu = sub.mu

    resid = H @ x + g + (A_in.T @ mu if mu.size else 0.0)
    if A_eq.shape[0]:
        lam, *_ = np.linalg.lstsq(A_eq.T, -resid, rcond=None)
    else:
        lam = np.zeros(0)
    return QpSolution(x=x, mu=mu, lam=lam, status=QpStatus.OPTIMAL)
