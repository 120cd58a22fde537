"""Probabilistic reachable sets, constraint tightening, terminal ingredients.

Given a contraction certificate (M, rho, wbar) and a probability level p,
the true state stays inside the nominal-centered ellipsoid
{e | e^T M e <= sigma_k} with probability at least p, where sigma_k follows
the closed-form geometric recursion below.  Tightening a polytope row by
c_j sqrt(sigma_k) with c_j = ||M^(-1/2) h_j|| is the exact Pontryagin
difference with that ellipsoid.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .model import ConfigurationError


class EmptyTightenedSet(RuntimeError):
    """A tightened margin became non-positive (set lost the origin)."""

    def __init__(self, row, step, margin):
        super().__init__(
            f"tightened margin for row {row} at step {step} is {margin:.6g} <= 0"
        )
        self.row = row
        self.step = step
        self.margin = margin


def prs_radius(cert, p, k):
    """sigma_{x,k} = (1 - rho^k)/(1 - rho) * wbar/(1 - p); k may be inf."""
    if not 0.0 < p < 1.0:
        raise ConfigurationError(f"probability level p={p} outside (0, 1)")
    if np.isinf(k):
        return cert.wbar / ((1.0 - cert.rho) * (1.0 - p))
    if k < 0:
        raise ConfigurationError("step index must be nonnegative")
    return float((1.0 - cert.rho**k) / (1.0 - cert.rho) * cert.wbar / (1.0 - p))


@dataclass(frozen=True)
class PrsSchedule:
    """Radii sigma_{x,k} for k = 0..K plus the asymptotic value."""

    cert: object
    p: float
    K: int
    sigma: np.ndarray = field(init=False)
    sigma_inf: float = field(init=False)

    def __post_init__(self):
        sig = np.array([prs_radius(self.cert, self.p, k) for k in range(self.K + 1)])
        object.__setattr__(self, "sigma", sig)
        object.__setattr__(self, "sigma_inf", prs_radius(self.cert, self.p, np.inf))

    def radius(self, k):
        if np.isinf(k):
            return self.sigma_inf
        if k <= self.K:
            return float(self.sigma[int(k)])
        return prs_radius(self.cert, self.p, k)


def tightening_coefficients(cons, cert):
    """c_j = ||M^(-1/2) h_j|| = sqrt(h_j^T W h_j), one per polytope row."""
    H = cons.H
    return np.sqrt(np.einsum("ji,ik,jk->j", H, cert.W, H))


@dataclass(frozen=True)
class TightenedConstraints:
    """Per-step margins b_{j,k} = 1 - c_j sqrt(sigma_{x,k})."""

    cons: object
    cert: object
    schedule: PrsSchedule
    c: np.ndarray = field(init=False)

    def __post_init__(self):
        object.__setattr__(self, "c", tightening_coefficients(self.cons, self.cert))

    def margins(self, k):
        sig = self.schedule.radius(k)
        return 1.0 - self.c * np.sqrt(max(sig, 0.0))

    @property
    def margins_inf(self):
        return 1.0 - self.c * np.sqrt(self.schedule.sigma_inf)

    def contains(self, x, k, tol=0.0):
        return bool(np.all(self.cons.H @ np.asarray(x, dtype=float) <= self.margins(k) + tol))


def tighten(cons, cert, schedule) -> TightenedConstraints:
    """Build the tightened-constraint family; requires nonempty sets.

    Raises EmptyTightenedSet naming the first violating (row, step); since
    margins are non-increasing in k it is checked at the asymptotic radius.
    """
    tc = TightenedConstraints(cons=cons, cert=cert, schedule=schedule)
    b_inf = tc.margins_inf
    j = int(np.argmin(b_inf))
    if b_inf[j] <= 0.0:
        # report the earliest step at which this row's margin dies
        for k in range(schedule.K + 1):
            if tc.margins(k)[j] <= 0.0:
                raise EmptyTightenedSet(j, k, float(tc.margins(k)[j]))
        raise EmptyTightenedSet(j, np.inf, float(b_inf[j]))
    return tc


def export_tightening_csv(tc: TightenedConstraints, path, K=None):
    """Write the per-step tightening table: k, sigma_xk, margins per row."""
    sched = tc.schedule
    K = sched.K if K is None else K
    with open(path, "w") as fh:
        fh.write("# schema=1\n")
        cols = ["k", "sigma_xk"] + [f"b_{j+1}" for j in range(tc.cons.n_rows)]
        fh.write(",".join(cols) + "\n")
        for k in range(K + 1):
            b = tc.margins(k)
            row = [str(k), repr(float(sched.radius(k)))] + [repr(float(v)) for v in b]
            fh.write(",".join(row) + "\n")


def prs_membership(x, z, cert, p, k):
    """True iff ||x - z||_M^2 <= sigma_{x,k}."""
    e = np.asarray(x, dtype=float) - np.asarray(z, dtype=float)
    return bool(e @ cert.M @ e <= prs_radius(cert, p, k))


def support_on_ellipsoid(h, M, sigma):
    """max h^T e over the ellipsoid e^T M e <= sigma, by eigen-transform.

    Used as the independent geometric oracle for the tightening formula.
    """
    vals, vecs = np.linalg.eigh(M)
    # e = V diag(1/sqrt(vals)) y with ||y||^2 <= sigma
    g = np.diag(1.0 / np.sqrt(vals)) @ vecs.T @ np.asarray(h, dtype=float)
    return float(np.sqrt(sigma) * np.linalg.norm(g))


def max_generalized_eig(Q, M):
    """lambda_max(Q, M) via Cholesky of M and a symmetric eigensolve."""
    L = np.linalg.cholesky(M)
    Linv_Q = np.linalg.solve(L, Q)
    A = np.linalg.solve(L, Linv_Q.T).T
    return float(np.linalg.eigvalsh(0.5 * (A + A.T)).max())


@dataclass(frozen=True)
class TerminalIngredients:
    """u_f = 0, terminal cost P = c_f M, terminal set {z | z^T M z <= alpha_f}."""

    cert: object
    Q: np.ndarray
    c_f: float
    alpha_f: float

    @property
    def P(self):
        return self.c_f * self.cert.M

    def in_terminal_set(self, z, tol=0.0):
        z = np.asarray(z, dtype=float)
        return bool(z @ self.cert.M @ z <= self.alpha_f + tol)

    def terminal_cost(self, z):
        z = np.asarray(z, dtype=float)
        return float(self.c_f * (z @ self.cert.M @ z))


def terminal_ingredients(cert, Q, cons, schedule) -> TerminalIngredients:
    """c_f = lambda_max(Q, M)/(1-rho); alpha_f is the largest ellipsoid level
    inside the asymptotic tightened polytope (margins are monotone in k)."""
    tc = tighten(cons, cert, schedule)  # propagates EmptyTightenedSet
    c = tc.c
    b_inf = tc.margins_inf
    alpha_f = float(np.min((b_inf / c) ** 2))
    c_f = max_generalized_eig(np.asarray(Q, dtype=float), cert.M) / (1.0 - cert.rho)
    return TerminalIngredients(cert=cert, Q=np.asarray(Q, dtype=float), c_f=c_f, alpha_f=alpha_f)
