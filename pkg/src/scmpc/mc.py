"""Monte Carlo validation of the probabilistic guarantees.

Open-loop experiments compare the empirical mean weighted error between
the noisy plant and its nominal twin against the analytic geometric bound,
and count containment in the nominal-centered ellipsoids.  Closed-loop
experiments aggregate receding-horizon traces.  All statistics accumulate
in streaming (count/sum/sum-of-squares) form, realizations use
counter-based RNG streams keyed by (master seed, index), and chunked or
multi-process execution merges per-worker accumulators, so results do not
depend on worker count or execution order.
"""

from __future__ import annotations

from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .model import realization_rng
from .ocp import OcpStatus, solve_ocp
from .prs import prs_radius
from .smpc import SmpcController, run_closed_loop

WILSON_Z95 = 1.959963984540054


def wilson_interval(successes, n, z=WILSON_Z95):
    """Score interval for a binomial proportion; returns (freq, lo, hi)."""
    if n < 1:
        raise ValueError("need at least one sample")
    phat = successes / n
    denom = 1.0 + z * z / n
    center = (phat + z * z / (2 * n)) / denom
    half = (z / denom) * np.sqrt(phat * (1 - phat) / n + z * z / (4 * n * n))
    return phat, center - half, center + half


def containment_estimator(flags):
    """Frequency plus Wilson 95 percent interval from boolean samples."""
    flags = np.asarray(flags, dtype=bool)
    return wilson_interval(int(flags.sum()), flags.size)


@dataclass(frozen=True)
class PeriodicForcing:
    amplitude: float = 1000.0
    period: float = 12.5

    def __post_init__(self):
        if self.amplitude <= 0 or self.period <= 0:
            raise ValueError("amplitude and period must be positive")

    def input_at(self, k, dt):
        return np.array([self.amplitude * np.sin(2.0 * np.pi * k * dt / self.period)])


@dataclass(frozen=True)
class ZeroInput:
    def input_at(self, k, dt):
        return np.array([0.0])


@dataclass(frozen=True)
class ExperimentConfig:
    n_realizations: int = 10_000
    T: int = 160
    signal: object = field(default_factory=PeriodicForcing)
    master_seed: int = 0
    chunk: int = 2000
    threads: int = 1

    def __post_init__(self):
        if self.n_realizations < 100:
            raise ValueError("need at least 100 realizations for the statistics")
        if self.T < 1:
            raise ValueError("T must be positive")


@dataclass
class OpenLoopReport:
    """Per-step error statistics and containment for one distribution."""

    k: np.ndarray
    mean_err: np.ndarray
    se_err: np.ndarray
    bound: np.ndarray
    containment: np.ndarray
    wilson_lo: np.ndarray
    wilson_hi: np.ndarray
    n_realizations: int

    def bound_holds(self, slack_sigmas=3.0):
        return bool(np.all(self.mean_err <= self.bound + slack_sigmas * self.se_err))

    def containment_above(self, p, z=3.0):
        """True when every step's frequency is >= p up to z-sigma Wilson slack."""
        for succ_freq in self.containment:
            _, _, hi = wilson_interval(succ_freq * self.n_realizations,
                                       self.n_realizations, z=z)
            if hi < p:
                return False
        return True

    def to_csv(self, path):
        with open(path, "w") as fh:
            fh.write("# schema=1\n")
            fh.write("k,mean_err_M2,bound,containment,wilson_lo,wilson_hi\n")
            for i in range(len(self.k)):
                fh.write(
                    f"{int(self.k[i])},{float(self.mean_err[i])!r},"
                    f"{float(self.bound[i])!r},{float(self.containment[i])!r},"
                    f"{float(self.wilson_lo[i])!r},{float(self.wilson_hi[i])!r}\n"
                )


def open_loop_experiment(cfg: ExperimentConfig, model, cert, noise, p) -> OpenLoopReport:
    """Simulate the plant and its nominal twin under a fixed input signal.

    The nominal trajectory is shared by all realizations; the error
    statistics and containment counts stream over realization chunks.
    """
    T = cfg.T
    dt = getattr(model, "dt", 1.0)
    u_seq = np.array([cfg.signal.input_at(k, dt) for k in range(T)])
    # nominal twin (single trajectory)
    z = np.zeros((T + 1, model.n))
    for k in range(T):
        z[k + 1] = model.f_nom(z[k], u_seq[k])

    sigma = np.array([prs_radius(cert, p, k) for k in range(T + 1)])
    M = cert.M
    G = np.asarray(model.G, dtype=float)

    sum_e = np.zeros(T + 1)
    sum_e2 = np.zeros(T + 1)
    contained = np.zeros(T + 1)
    done = 0
    while done < cfg.n_realizations:
        size = min(cfg.chunk, cfg.n_realizations - done)
        W = np.empty((size, T, model.q))
        for i in range(size):
            rng = realization_rng(cfg.master_seed, done + i)
            W[i] = noise.sample(rng, size=T)
        X = np.tile(z[0], (size, 1))
        for k in range(T):
            e = X - z[k]
            energy = np.einsum("ra,ab,rb->r", e, M, e)
            sum_e[k] += energy.sum()
            sum_e2[k] += (energy**2).sum()
            contained[k] += np.count_nonzero(energy <= sigma[k] + 1e-15)
            U = np.tile(u_seq[k], (size, 1))
            X = model.f_nom_batch(X, U) + W[:, k] @ G.T
        e = X - z[T]
        energy = np.einsum("ra,ab,rb->r", e, M, e)
        sum_e[T] += energy.sum()
        sum_e2[T] += (energy**2).sum()
        contained[T] += np.count_nonzero(energy <= sigma[T] + 1e-15)
        done += size

    n = cfg.n_realizations
    mean = sum_e / n
    var = np.maximum(sum_e2 / n - mean**2, 0.0)
    se = np.sqrt(var / n)
    bound = (1.0 - cert.rho ** np.arange(T + 1)) / (1.0 - cert.rho) * cert.wbar
    freq = contained / n
    lo = np.empty(T + 1)
    hi = np.empty(T + 1)
    for k in range(T + 1):
        _, lo[k], hi[k] = wilson_interval(contained[k], n)
    return OpenLoopReport(
        k=np.arange(T + 1), mean_err=mean, se_err=se, bound=bound,
        containment=freq, wilson_lo=lo, wilson_hi=hi, n_realizations=n,
    )


@dataclass
class ClosedLoopReport:
    """Aggregated closed-loop statistics over realizations.

    mean_stage_cost and fallback_rate have one entry per applied step
    (k = 0..T-1); p_in_X covers the visited states k = 0..T.
    """

    k: np.ndarray
    mean_stage_cost: np.ndarray
    p_in_X: np.ndarray
    fallback_rate: np.ndarray
    n_realizations: int
    hard_failures: int
    nominal_feasible: bool        # z(k) in tightened set, all steps/realizations
    total_fallback_rate: float

    @property
    def max_p_in_X(self):
        return float(self.p_in_X.max())

    @property
    def min_p_in_X(self):
        return float(self.p_in_X.min())

    def chance_constraints_above(self, p, z=3.0):
        n = self.n_realizations
        for freq in self.p_in_X:
            _, _, hi = wilson_interval(freq * n, n, z=z)
            if hi < p:
                return False
        return True

    def to_csv(self, path):
        with open(path, "w") as fh:
            fh.write("# schema=1\n")
            fh.write("k,mean_stage_cost,p_in_X,fallback_rate\n")
            for i in range(len(self.k)):
                fh.write(
                    f"{int(self.k[i])},{float(self.mean_stage_cost[i])!r},"
                    f"{float(self.p_in_X[i])!r},{float(self.fallback_rate[i])!r}\n"
                )


def _closed_loop_batch(args):
    """Worker: run a batch of realizations, return mergeable accumulators."""
    (model, tightened, terminal, N, Q, R, noise, x0, T, seed, indices,
     init_guess, init_active, z_tol) = args
    cost_sum = np.zeros(T)
    in_X = np.zeros(T + 1)
    fallback = np.zeros(T)
    hard = 0
    z_ok = True
    for idx in indices:
        ctrl = SmpcController(model=model, tightened=tightened, terminal=terminal,
                              N=N, Q=Q, R=R)
        trace = run_closed_loop(ctrl, model, noise, x0, T, seed, realization=idx,
                                initial_guess=init_guess, initial_active=init_active)
        cost_sum += trace.stage_cost
        in_X += trace.in_X.astype(float)
        fallback += trace.fallback.astype(float)
        hard += sum(1 for k in range(T)
                    if trace.status[k] is not OcpStatus.SOLVED and not trace.fallback[k])
        for k in range(T + 1):
            if not tightened.contains(trace.z[k], k, tol=z_tol):
                z_ok = False
    return cost_sum, in_X, fallback, hard, z_ok, len(indices)


def closed_loop_experiment(cfg: ExperimentConfig, model, tightened, terminal,
                           N, Q, R, noise, x0, z_tol=1e-7) -> ClosedLoopReport:
    """Run the receding-horizon loop over cfg.n_realizations noise streams.

    All realizations share the deterministic step-0 problem, so it is
    solved once here and its solution warm-starts every worker.
    """
    T = cfg.T
    ctrl0 = SmpcController(model=model, tightened=tightened, terminal=terminal,
                           N=N, Q=Q, R=R)
    ctrl0.initialize(x0)
    sol0 = solve_ocp(ctrl0._problem(0), np.asarray(x0, float), np.asarray(x0, float))
    init_guess = sol0.u if sol0.status is OcpStatus.SOLVED else None
    init_active = sol0.active_set if sol0.status is OcpStatus.SOLVED else ()

    indices = np.arange(cfg.n_realizations)
    batches = [
        indices[i:i + cfg.chunk] for i in range(0, cfg.n_realizations, cfg.chunk)
    ]
    args = [
        (model, tightened, terminal, N, Q, R, noise, np.asarray(x0, float), T,
         cfg.master_seed, batch, init_guess, init_active, z_tol)
        for batch in batches
    ]
    workers = max(1, cfg.threads)
    if workers == 1 or len(batches) == 1:
        results = [_closed_loop_batch(a) for a in args]
    else:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(_closed_loop_batch, args))

    cost_sum = np.zeros(T)
    in_X = np.zeros(T + 1)
    fallback = np.zeros(T)
    hard = 0
    z_ok = True
    n = 0
    for cs, ix, fb, hd, zk, cnt in results:
        cost_sum += cs
        in_X += ix
        fallback += fb
        hard += hd
        z_ok &= zk
        n += cnt
    return ClosedLoopReport(
        k=np.arange(T),
        mean_stage_cost=cost_sum / n,
        p_in_X=in_X / n,
        fallback_rate=fallback / n,
        n_realizations=n,
        hard_failures=hard,
        nominal_feasible=z_ok,
        total_fallback_rate=float(fallback.sum() / (n * T)),
    )
