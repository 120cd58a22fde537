"""Exact shrinking-horizon stochastic MPC on enumerable toy instances.

The expected cost is realized by exhaustive enumeration of the finite
noise tree, so the re-optimization inequality (closed-loop expected cost
never exceeding the open-loop optimum) and the per-step chance
constraints can be checked to solver tolerance instead of statistically.
This module is a correctness oracle, not a controller: trees grow as
(support size)^N.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass, field

import numpy as np

from .ocp import OcpStatus
from .prs import PrsSchedule, tighten
from .qp import QpStatus, solve_qp_ineq


class TreeTooLarge(RuntimeError):
    pass


@dataclass(frozen=True)
class ScenarioTree:
    """Per-step finite noise support with probabilities.

    values: (s, q) support atoms shared by every step; probs: (s,) summing
    to one.  Leaves are all s^N index combinations.
    """

    values: np.ndarray
    probs: np.ndarray
    N: int
    max_leaves: int = 10_000

    def __post_init__(self):
        object.__setattr__(self, "values", np.atleast_2d(np.asarray(self.values, dtype=float)))
        object.__setattr__(self, "probs", np.asarray(self.probs, dtype=float))
        if abs(self.probs.sum() - 1.0) > 1e-12:
            raise ValueError("support probabilities must sum to one")
        if self.n_leaves > self.max_leaves:
            raise TreeTooLarge(f"{self.n_leaves} leaves exceed the cap {self.max_leaves}")

    @property
    def support_size(self):
        return self.values.shape[0]

    @property
    def q(self):
        return self.values.shape[1]

    @property
    def n_leaves(self):
        return self.support_size**self.N

    def leaf_indices(self):
        return np.array(list(itertools.product(range(self.support_size), repeat=self.N)),
                        dtype=int)

    def paths(self):
        """All noise paths (L, N, q) and their probabilities (L,)."""
        idx = self.leaf_indices()
        w = self.values[idx]
        p = self.probs[idx].prod(axis=1)
        return w, p

    def second_moment(self):
        return np.einsum("s,sa,sb->ab", self.probs, self.values, self.values)


@dataclass
class ShrinkingSetup:
    """Static data for one toy instance of the shrinking-horizon scheme."""

    model: object
    cons: object
    cert: object
    p: float
    Q: np.ndarray
    R: np.ndarray
    P: np.ndarray               # terminal cost weight
    tree: ScenarioTree
    tightened: object = field(init=False)

    def __post_init__(self):
        self.Q = np.atleast_2d(np.asarray(self.Q, dtype=float))
        self.R = np.atleast_2d(np.asarray(self.R, dtype=float))
        self.P = np.atleast_2d(np.asarray(self.P, dtype=float))
        sched = PrsSchedule(cert=self.cert, p=self.p, K=self.tree.N + 1)
        self.tightened = tighten(self.cons, self.cert, sched)

    @property
    def N(self):
        return self.tree.N


@dataclass
class ShrinkingSolution:
    u: np.ndarray               # full (N, m) sequence, first k entries fixed
    objective: float            # exact expected J_N given the prefix
    status: OcpStatus
    iterations: int = 0


def _roll_paths(model, x_k, u_seq, w_paths, start):
    """States of every scenario path from step `start` (x fixed at x_k)."""
    L = w_paths.shape[0]
    N = u_seq.shape[0]
    n = model.n
    X = np.empty((L, N - start + 1, n))
    X[:, 0] = x_k
    G = np.asarray(model.G, dtype=float)
    U = np.empty((L, model.m))
    for j, i in enumerate(range(start, N)):
        U[:] = u_seq[i]
        X[:, j + 1] = model.f_nom_batch(X[:, j], U) + w_paths[:, i] @ G.T
    return X


def _expected_cost(setup, x_k, u_seq, w_paths, path_probs, start):
    """Exact expectation of the cost-to-go from step `start`."""
    X = _roll_paths(setup.model, x_k, u_seq, w_paths, start)
    J = np.einsum("lia,ab,lib->l", X[:, :-1], setup.Q, X[:, :-1])
    J += float(np.einsum("ia,ab,ib->", u_seq[start:], setup.R, u_seq[start:]))
    J += np.einsum("la,ab,lb->l", X[:, -1], setup.P, X[:, -1])
    return float(path_probs @ J)


def solve_shrinking(setup: ShrinkingSetup, x0, k, applied_inputs, x_k,
                    tol=1e-9, max_iter=60) -> ShrinkingSolution:
    """Minimize the exact scenario-enumerated expected cost over the free
    inputs u(k:N-1), the first k inputs being pinned to their applied values.

    Constraints are the tightened polytope on the nominal chain z(i),
    i in [k, N-1], plus the input box; they are deterministic because z
    rolls noise-free from x0.
    """
    model = setup.model
    N = setup.N
    n, m = model.n, model.m
    x0 = np.asarray(x0, dtype=float)
    x_k = np.asarray(x_k, dtype=float)
    applied = np.asarray(applied_inputs, dtype=float).reshape(k, m)
    tc = setup.tightened
    w_paths, path_probs = setup.tree.paths()

    u_seq = np.zeros((N, m))
    u_seq[:k] = applied
    n_free = N - k
    D = n_free * m
    if n_free == 0:
        raise ValueError("no free inputs left to optimize")

    # fixed prefix of the nominal chain; stage-k feasibility is decided now
    z_prefix = np.empty((k + 1, n))
    z_prefix[0] = x0
    for i in range(k):
        z_prefix[i + 1] = model.f_nom(z_prefix[i], applied[i])
    if np.any(setup.cons.H @ z_prefix[k] > tc.margins(k) + 1e-9):
        return ShrinkingSolution(u=u_seq, objective=np.inf, status=OcpStatus.INFEASIBLE)

    H_cons = setup.cons.H
    margins = np.array([tc.margins(i) for i in range(N)])
    status = OcpStatus.MAX_ITERATIONS
    it_done = 0
    for it in range(max_iter):
        it_done = it + 1
        # nominal chain and its input sensitivities (free inputs only)
        Zs = np.empty((N - k + 1, n))
        Zs[0] = z_prefix[k]
        Sz = np.zeros((N - k + 1, n, D))
        for j, i in enumerate(range(k, N)):
            A = model.jacobian(Zs[j], u_seq[i])
            B = model.input_jacobian(Zs[j], u_seq[i])
            Zs[j + 1] = model.f_nom(Zs[j], u_seq[i])
            Sz[j + 1] = A @ Sz[j]
            Sz[j + 1][:, j * m:(j + 1) * m] += B

        # scenario chains and sensitivities, one batch per path
        L = w_paths.shape[0]
        X = _roll_paths(model, x_k, u_seq, w_paths, k)
        Sx = np.zeros((L, N - k + 1, n, D))
        U = np.empty((L, m))
        for j, i in enumerate(range(k, N)):
            U[:] = u_seq[i]
            A = model.jacobian_batch(X[:, j], U)
            B = model.input_jacobian_batch(X[:, j], U)
            Sx[:, j + 1] = A @ Sx[:, j]
            Sx[:, j + 1, :, j * m:(j + 1) * m] += B

        # Gauss-Newton expected-cost model over the free inputs
        Wt = np.repeat(setup.Q[None], N - k, axis=0)
        Wt[-1] = setup.P
        WS = np.einsum("iab,libd->liad", Wt, Sx[:, 1:])
        Hl = 2.0 * np.einsum("liad,liae->lde", Sx[:, 1:], WS)
        gl = 2.0 * np.einsum("liad,lia->ld", WS, X[:, 1:])
        H_red = np.einsum("l,lde->de", path_probs, Hl)
        g_red = np.einsum("l,ld->d", path_probs, gl)
        for j in range(n_free):
            sl = slice(j * m, (j + 1) * m)
            H_red[sl, sl] += 2.0 * setup.R
            g_red[sl] += 2.0 * setup.R @ u_seq[k + j]
        H_red = 0.5 * (H_red + H_red.T)

        # constraint rows: stages k+1..N-1 on z, plus input box
        rows = [np.einsum("ra,iad->ird", H_cons, Sz[1:N - k]).reshape(-1, D)] \
            if N - k > 1 else [np.zeros((0, D))]
        rhs = [(margins[k + 1:N] - Zs[1:N - k] @ H_cons.T).reshape(-1)] \
            if N - k > 1 else [np.zeros(0)]
        I = np.eye(D)
        rows.append(I)
        rhs.append(np.tile(setup.cons.u_max, n_free) - u_seq[k:].reshape(-1))
        rows.append(-I)
        rhs.append(u_seq[k:].reshape(-1) - np.tile(setup.cons.u_min, n_free))
        C = np.vstack(rows)
        r = np.concatenate(rhs)

        qp = solve_qp_ineq(H_red, g_red, C, r)
        if qp.status is not QpStatus.OPTIMAL:
            return ShrinkingSolution(u=u_seq, objective=np.inf,
                                     status=OcpStatus.INFEASIBLE, iterations=it_done)
        du = qp.x
        u_new = u_seq.copy()
        u_new[k:] += du.reshape(n_free, m)
        u_seq = u_new
        if np.abs(du).max() <= tol * (1.0 + np.abs(u_seq).max()):
            status = OcpStatus.SOLVED
            break

    obj = _expected_cost(setup, x_k, u_seq, w_paths, path_probs, k)
    return ShrinkingSolution(u=u_seq, objective=obj, status=status, iterations=it_done)


@dataclass
class ShrinkingReport:
    expected_cost_open: float
    expected_cost_closed: float
    expected_opt_by_step: np.ndarray    # E[realized past + optimal cost-to-go]
    constraint_prob: np.ndarray         # exact P{x(k) in X} for k = 0..N
    step_inequality_ok: bool
    max_step_violation: float

    @property
    def reoptimization_improves(self):
        return self.expected_cost_closed <= self.expected_cost_open + 1e-6

    def to_csv(self, path):
        with open(path, "w") as fh:
            fh.write("# schema=1\n")
            fh.write("k,expected_cost_open,expected_cost_closed,constraint_prob_k\n")
            N = len(self.expected_opt_by_step) - 1
            for k in range(N + 1):
                fh.write(
                    f"{k},{self.expected_cost_open!r},"
                    f"{float(self.expected_opt_by_step[k])!r},"
                    f"{float(self.constraint_prob[k])!r}\n"
                )


def validate_cost_monotonicity(setup: ShrinkingSetup, x0) -> ShrinkingReport:
    """Enumerate every noise path, re-solving at each step, and compare the
    exact closed-loop expected cost against the open-loop optimum.

    Also asserts the per-prefix inequality behind the comparison: fixing
    the applied inputs never makes the expected total cost worse than the
    previous step's evaluation.  Solutions are local (SQP), so the report
    carries the worst observed violation rather than silently assuming
    global optimality.
    """
    model = setup.model
    tree = setup.tree
    N = setup.N
    x0 = np.asarray(x0, dtype=float)
    values, probs = tree.values, tree.probs
    s = tree.support_size
    G = np.asarray(model.G, dtype=float)

    # prefix -> (realized x_k, applied inputs, realized past cost, prob)
    sol0 = solve_shrinking(setup, x0, 0, np.zeros((0, model.m)), x0)
    if sol0.status is not OcpStatus.SOLVED:
        raise RuntimeError(f"open-loop problem not solved: {sol0.status}")
    open_cost = sol0.objective

    prefixes = {(): (x0, np.zeros((0, model.m)), 0.0, 1.0, sol0)}
    expected_opt = [open_cost]
    constraint_prob = [float(setup.cons.contains(x0))]
    max_step_violation = 0.0

    for k in range(N):
        new_prefixes = {}
        prob_in_X = 0.0
        for key, (x_k, applied, past, pr, sol) in prefixes.items():
            u_k = sol.u[k]
            stage = float(x_k @ setup.Q @ x_k + u_k @ setup.R @ u_k)
            cond_expectation = 0.0
            for a in range(s):
                w = values[a]
                x_next = model.f_nom(x_k, u_k) + G @ w
                applied_next = np.vstack([applied, u_k[None, :]])
                if k + 1 < N:
                    sol_next = solve_shrinking(setup, x0, k + 1, applied_next, x_next)
                    if sol_next.status is not OcpStatus.SOLVED:
                        raise RuntimeError(
                            f"re-solve failed at step {k+1}: {sol_next.status}")
                    togo = sol_next.objective
                else:
                    sol_next = sol
                    togo = float(x_next @ setup.P @ x_next)
                total_next = past + stage + togo
                cond_expectation += probs[a] * total_next
                new_prefixes[key + (a,)] = (
                    x_next, applied_next, past + stage, pr * probs[a], sol_next)
            total_now = past + sol.objective
            max_step_violation = max(max_step_violation, cond_expectation - total_now)
        prefixes = new_prefixes
        expected_opt.append(sum(pr * (past + (sol.objective if k + 1 < N
                                               else float(x_k @ setup.P @ x_k)))
                                for (x_k, _, past, pr, sol) in prefixes.values()))
        prob_in_X = sum(pr for (x_k, _, _, pr, _) in prefixes.values()
                        if setup.cons.contains(x_k))
        constraint_prob.append(prob_in_X)

    closed_cost = expected_opt[-1]
    return ShrinkingReport(
        expected_cost_open=open_cost,
        expected_cost_closed=closed_cost,
        expected_opt_by_step=np.array(expected_opt),
        constraint_prob=np.array(constraint_prob),
        step_inequality_ok=max_step_violation <= 1e-6,
        max_step_violation=max_step_violation,
    )
