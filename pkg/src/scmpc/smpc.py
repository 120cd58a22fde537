"""Receding-horizon closed loop with indirect feedback.

The controller keeps an internal nominal state z that evolves only through
the nominal dynamics z+ = f(z, u, 0) and is never reset from measurements;
the measured state enters the optimization solely through the cost chain.
On solver failure the applied input falls back to the shifted previous
sequence, which the terminal ingredients keep feasible.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .model import nominal_step, realization_rng, sample_noise, step
from .ocp import OcpProblem, OcpStatus, shift_candidate, solve_ocp


class InitialInfeasibility(RuntimeError):
    """Problem infeasible at k = 0; the closed-loop guarantees assume it."""


@dataclass
class SmpcController:
    """State and configuration of one receding-horizon controller."""

    model: object
    tightened: object            # TightenedConstraints (absolute-step margins)
    terminal: object             # TerminalIngredients
    N: int
    Q: np.ndarray
    R: np.ndarray
    tol_kkt: float = 1e-6
    tol_con: float = 1e-8
    max_sqp_iter: int = 100

    z: np.ndarray = None
    k: int = 0
    last_solution: object = None
    _margin_table: np.ndarray = field(default=None, repr=False)

    def initialize(self, x0, initial_guess=None, initial_active=()):
        self.z = np.array(x0, dtype=float)
        self.k = 0
        self.last_solution = None
        self._plan = None            # input sequence whose head gets applied
        self._active = tuple(initial_active)
        self._initial_guess = None if initial_guess is None else np.array(initial_guess)
        return self

    def _margins(self, k):
        # absolute-step margins for stages k..k+N-1, cached in a table
        table = self._margin_table
        if table is None or table.shape[0] < k + self.N:
            rows = [self.tightened.margins(i) for i in range(k + self.N + 64)]
            self._margin_table = table = np.array(rows)
        return table[k:k + self.N]

    def _problem(self, k):
        cons = self.tightened.cons
        return OcpProblem(
            model=self.model, N=self.N, Q=self.Q, R=self.R, P=self.terminal.P,
            H_rows=cons.H, margins=self._margins(k),
            M_term=self.terminal.cert.M, alpha_f=self.terminal.alpha_f,
            u_min=cons.u_min, u_max=cons.u_max,
            tol_kkt=self.tol_kkt, tol_con=self.tol_con,
            max_sqp_iter=self.max_sqp_iter,
        )

    def controller_step(self, x_k):
        """Solve the horizon problem at the current step and advance z.

        Returns (u_k, info) where info records solver status, objective and
        whether the fallback input was used.
        """
        if self.z is None:
            raise RuntimeError("controller not initialized")
        x_k = np.asarray(x_k, dtype=float)
        prob = self._problem(self.k)
        if self._plan is None:
            warm = self._initial_guess
        else:
            warm = shift_candidate(self._plan)
        sol = solve_ocp(prob, x_k, self.z, warm=warm, warm_active=self._active)

        fallback = False
        if sol.status is OcpStatus.SOLVED:
            self.last_solution = sol
            self._plan = sol.u
            self._active = sol.active_set
            u_k = sol.u[0]
        elif self._plan is not None:
            # apply the shifted candidate's first input and keep shifting;
            # terminal invariance keeps this chain feasible
            fallback = True
            self._plan = warm
            u_k = warm[0]
        else:
            raise InitialInfeasibility(
                f"horizon problem infeasible at k=0 (status {sol.status.value})"
            )
        info = {
            "status": sol.status,
            "objective": sol.objective,
            "fallback": fallback,
            "sqp_iters": sol.sqp_iters,
            "kkt_residual": sol.kkt_residual,
        }
        self.z = nominal_step(self.model, self.z, u_k)
        self.k += 1
        return np.atleast_1d(u_k), info


@dataclass
class ClosedLoopTrace:
    """One noise realization of the closed loop: T+1 states, T inputs."""

    x: np.ndarray
    z: np.ndarray
    u: np.ndarray
    stage_cost: np.ndarray
    in_X: np.ndarray
    status: list
    fallback: np.ndarray
    objective: np.ndarray
    seed: tuple

    @property
    def T(self):
        return len(self.u)

    def recompute_nominal(self, model):
        """Re-roll z from (x0, applied inputs); indirect feedback means this
        must reproduce the stored nominal chain exactly."""
        z = np.empty_like(self.z)
        z[0] = self.x[0]
        for k in range(self.T):
            z[k + 1] = nominal_step(model, z[k], self.u[k])
        return z

    def to_csv(self, path_or_buf):
        n = self.x.shape[1]
        m = self.u.shape[1]
        own = isinstance(path_or_buf, (str, bytes)) or hasattr(path_or_buf, "__fspath__")
        fh = open(path_or_buf, "w") if own else path_or_buf
        try:
            fh.write("# schema=1\n")
            cols = (
                ["k"]
                + [f"x_{i+1}" for i in range(n)]
                + [f"z_{i+1}" for i in range(n)]
                + [f"u_{i+1}" for i in range(m)]
                + ["stage_cost", "in_X", "status", "fallback"]
            )
            fh.write(",".join(cols) + "\n")
            for k in range(self.T):
                row = (
                    [str(k)]
                    + [repr(float(v)) for v in self.x[k]]
                    + [repr(float(v)) for v in self.z[k]]
                    + [repr(float(v)) for v in self.u[k]]
                    + [repr(float(self.stage_cost[k])), str(int(self.in_X[k])),
                       self.status[k].value, str(int(self.fallback[k]))]
                )
                fh.write(",".join(row) + "\n")
        finally:
            if own:
                fh.close()


def run_closed_loop(ctrl: SmpcController, model, noise, x0, T, seed,
                    realization=0, initial_guess=None, initial_active=()):
    """Simulate one closed-loop realization; deterministic given the seed.

    The plant and the controller's nominal chain are co-simulated: the
    measured state feeds only the cost chain, while z evolves nominally.
    """
    if T < 1:
        raise ValueError("need at least one step")
    rng = realization_rng(seed, realization)
    ctrl.initialize(x0, initial_guess=initial_guess, initial_active=initial_active)
    n, m = model.n, model.m
    xs = np.empty((T + 1, n))
    zs = np.empty((T + 1, n))
    us = np.empty((T, m))
    costs = np.empty(T)
    in_X = np.empty(T + 1, dtype=bool)
    fallback = np.zeros(T, dtype=bool)
    statuses = []
    objectives = np.empty(T)
    xs[0] = x0
    zs[0] = x0
    cons = ctrl.tightened.cons
    Q, R = ctrl.Q, ctrl.R
    for k in range(T):
        in_X[k] = cons.contains(xs[k])
        u_k, info = ctrl.controller_step(xs[k])
        us[k] = u_k
        statuses.append(info["status"])
        fallback[k] = info["fallback"]
        objectives[k] = info["objective"]
        costs[k] = xs[k] @ Q @ xs[k] + u_k @ R @ u_k
        w = sample_noise(noise, rng)
        xs[k + 1] = step(model, xs[k], u_k, w)
        zs[k + 1] = ctrl.z
    in_X[T] = cons.contains(xs[T])
    return ClosedLoopTrace(
        x=xs, z=zs, u=us, stage_cost=costs, in_X=in_X, status=statuses,
        fallback=fallback, objective=objectives, seed=(seed, realization),
    )
