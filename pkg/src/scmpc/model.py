"""Plant models, constraint polytopes, and process-noise distributions.

Every dynamics object here is additive in the noise: the true step is
``f(x, u, w) = f_nom(x, u) + G @ w`` with a constant noise-input matrix G.
All evaluations are pure functions of their arguments; noise sampling uses
caller-owned RNG streams, so everything is safe to use from worker processes.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


class DimensionError(ValueError):
    """Argument shape does not match the model dimensions."""


class ConfigurationError(ValueError):
    """A model or noise parameter is outside its valid range."""


class UnboundedJacobian(ValueError):
    """The model's Jacobian cannot be enclosed in a bounded basis polytope."""


@dataclass(frozen=True)
class LinearSystem:
    """x+ = A x + B u + G w.  Mostly used by toy instances and tests."""

    A: np.ndarray
    B: np.ndarray
    G: np.ndarray

    @property
    def n(self):
        return self.A.shape[0]

    @property
    def m(self):
        return self.B.shape[1]

    @property
    def q(self):
        return self.G.shape[1]

    def f_nom(self, x, u):
        return self.A @ x + self.B @ u

    def jacobian(self, x, u):
        return np.array(self.A, copy=True)

    def input_jacobian(self, x, u):
        return np.array(self.B, copy=True)

    def jacobian_basis(self):
        """Constant Jacobian: no basis functions, a single 'vertex'."""
        return np.array(self.A, copy=True), [], np.zeros((0, 2))

    def theta(self, x, u):
        return np.zeros(0)

    def f_nom_batch(self, X, U):
        return X @ self.A.T + U @ self.B.T

    def jacobian_batch(self, X, U):
        return np.broadcast_to(self.A, (X.shape[0],) + self.A.shape).copy()

    def input_jacobian_batch(self, X, U):
        return np.broadcast_to(self.B, (X.shape[0],) + self.B.shape).copy()


@dataclass(frozen=True)
class MassSpringDamperChain:
    """Anchored chain of three masses with smooth Coulomb friction.

    State layout is positions p1..p3 (deviations from the spring equilibrium,
    mass 1 attached to the wall) followed by velocities v1..v3.  The actuator
    force acts on the last mass only and process noise is a force on each
    mass, so G = dt/mass * [0; I].

    Friction on mass i is -friction_force * tanh(v_i / friction_velocity),
    which has slope friction_force / friction_velocity at rest and saturates
    for |v_i| >> friction_velocity.  Discretization is forward Euler.

    The default friction force is strong enough that the unactuated masses
    can be arrested within the velocity limits when the last mass starts
    far out; with a 10 m initial stretch the spring pulls mass 2 with 20 N,
    so friction plus damping must absorb most of that for the constrained
    retraction to be dynamically possible at all.
    """

    n_masses: int = 3
    mass: float = 5.0
    spring: float = 2.0
    damper: float = 1.0
    dt: float = 0.25
    friction_force: float = 14.0
    friction_velocity: float = 0.7

    # derived, filled in __post_init__
    K: np.ndarray = field(init=False, repr=False)
    C: np.ndarray = field(init=False, repr=False)
    G: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        nm = self.n_masses
        if nm < 1:
            raise ConfigurationError("need at least one mass")
        # anchored-chain coupling matrix: tridiag(-1, 2, -1) with a free end
        T = 2.0 * np.eye(nm) - np.eye(nm, k=1) - np.eye(nm, k=-1)
        T[-1, -1] = 1.0
        object.__setattr__(self, "K", self.spring * T)
        object.__setattr__(self, "C", self.damper * T)
        G = (self.dt / self.mass) * np.vstack([np.zeros((nm, nm)), np.eye(nm)])
        object.__setattr__(self, "G", G)

    @property
    def n(self):
        return 2 * self.n_masses

    @property
    def m(self):
        return 1

    @property
    def q(self):
        return self.n_masses

    def _acc(self, pos, vel, u):
        friction = self.friction_force * np.tanh(vel / self.friction_velocity)
        force = -self.K @ pos - self.C @ vel - friction
        force[-1] += u[0]
        return force / self.mass

    def f_nom(self, x, u):
        nm = self.n_masses
        pos, vel = x[:nm], x[nm:]
        return x + self.dt * np.concatenate([vel, self._acc(pos, vel, u)])

    def jacobian(self, x, u):
        nm = self.n_masses
        vel = x[nm:]
        slope = (self.friction_force / self.friction_velocity) / np.cosh(
            np.clip(vel / self.friction_velocity, -350.0, 350.0)
        ) ** 2
        Acont = np.block(
            [
                [np.zeros((nm, nm)), np.eye(nm)],
                [-self.K / self.mass, -(self.C + np.diag(slope)) / self.mass],
            ]
        )
        return np.eye(self.n) + self.dt * Acont

    def input_jacobian(self, x, u):
        B = np.zeros((self.n, 1))
        B[-1, 0] = self.dt / self.mass
        return B

    def jacobian_basis(self):
        """Affine Jacobian decomposition A(x,u) = A0 + sum_i theta_i * Ai.

        theta_i = sech^2(v_i / friction_velocity) lies in (0, 1], so the
        basis box [0, 1]^n_masses encloses theta globally.
        """
        nm = self.n_masses
        Acont0 = np.block(
            [
                [np.zeros((nm, nm)), np.eye(nm)],
                [-self.K / self.mass, -self.C / self.mass],
            ]
        )
        A0 = np.eye(self.n) + self.dt * Acont0
        basis = []
        coef = -self.dt * self.friction_force / (self.friction_velocity * self.mass)
        for i in range(nm):
            Ai = np.zeros((self.n, self.n))
            Ai[nm + i, nm + i] = coef
            basis.append(Ai)
        bounds = np.array([[0.0, 1.0]] * nm)
        return A0, basis, bounds

    def theta(self, x, u):
        nm = self.n_masses
        vel = x[nm:]
        return 1.0 / np.cosh(np.clip(vel / self.friction_velocity, -350.0, 350.0)) ** 2

    # batched variants over a leading axis of states/inputs (used by the
    # horizon solver; results match the scalar versions exactly)
    def f_nom_batch(self, X, U):
        nm = self.n_masses
        pos, vel = X[:, :nm], X[:, nm:]
        friction = self.friction_force * np.tanh(vel / self.friction_velocity)
        force = -pos @ self.K.T - vel @ self.C.T - friction
        force[:, -1] += U[:, 0]
        return X + self.dt * np.concatenate([vel, force / self.mass], axis=1)

    def jacobian_batch(self, X, U):
        nm = self.n_masses
        vel = X[:, nm:]
        slope = (self.friction_force / self.friction_velocity) / np.cosh(
            np.clip(vel / self.friction_velocity, -350.0, 350.0)
        ) ** 2
        K = X.shape[0]
        out = np.tile(np.eye(self.n), (K, 1, 1))
        out[:, :nm, nm:] += self.dt * np.eye(nm)
        out[:, nm:, :nm] += self.dt * (-self.K / self.mass)
        out[:, nm:, nm:] += self.dt * (-self.C / self.mass)
        idx = np.arange(nm)
        out[:, nm + idx, nm + idx] -= self.dt * slope / self.mass
        return out

    def input_jacobian_batch(self, X, U):
        B = np.zeros((X.shape[0], self.n, 1))
        B[:, -1, 0] = self.dt / self.mass
        return B


def step(model, x, u, w):
    """One true-system step f(x,u,w) = f_nom(x,u) + G w."""
    x = np.asarray(x, dtype=float)
    u = np.atleast_1d(np.asarray(u, dtype=float))
    w = np.asarray(w, dtype=float)
    if x.shape != (model.n,) or u.shape != (model.m,) or w.shape != (model.q,):
        raise DimensionError(
            f"expected shapes ({model.n},), ({model.m},), ({model.q},); "
            f"got {x.shape}, {u.shape}, {w.shape}"
        )
    return model.f_nom(x, u) + model.G @ w


def nominal_step(model, x, u):
    """Nominal step f(x,u,0)."""
    u = np.atleast_1d(np.asarray(u, dtype=float))
    return model.f_nom(np.asarray(x, dtype=float), u)


def jacobian(model, x, u):
    """State Jacobian of the nominal map at (x, u)."""
    x = np.asarray(x, dtype=float)
    u = np.atleast_1d(np.asarray(u, dtype=float))
    if x.shape != (model.n,) or u.shape != (model.m,):
        raise DimensionError("state/input dimensions do not match the model")
    return model.jacobian(x, u)


def fd_jacobian(model, x, u, h=1e-6):
    """Central finite-difference Jacobian; the independent oracle for tests."""
    x = np.asarray(x, dtype=float)
    u = np.atleast_1d(np.asarray(u, dtype=float))
    n = model.n
    J = np.zeros((n, n))
    for j in range(n):
        e = np.zeros(n)
        e[j] = h
        J[:, j] = (model.f_nom(x + e, u) - model.f_nom(x - e, u)) / (2 * h)
    return J


@dataclass(frozen=True)
class Constraints:
    """Polytopic state set {x | H x <= 1 row-wise} and an input box.

    Rows are stored normalized so that each bound equals one; the origin is
    therefore strictly interior.
    """

    H: np.ndarray
    u_min: np.ndarray
    u_max: np.ndarray

    def __post_init__(self):
        H = np.atleast_2d(np.asarray(self.H, dtype=float))
        object.__setattr__(self, "H", H)
        object.__setattr__(self, "u_min", np.atleast_1d(np.asarray(self.u_min, dtype=float)))
        object.__setattr__(self, "u_max", np.atleast_1d(np.asarray(self.u_max, dtype=float)))
        if np.any(self.u_min > self.u_max):
            raise ConfigurationError("empty input box")

    @property
    def n_rows(self):
        return self.H.shape[0]

    def contains(self, x, margin=0.0):
        return bool(np.all(self.H @ np.asarray(x, dtype=float) <= 1.0 - margin))


def chain_constraints(chain, v_max=2.0, compression=1.0, u_max=100.0):
    """Default benchmark constraints: |v_i| <= v_max and each spring
    compressed by at most `compression` (rows scaled to h^T x <= 1)."""
    nm = chain.n_masses
    n = chain.n
    rows = []
    for i in range(nm):
        r = np.zeros(n)
        r[nm + i] = 1.0 / v_max
        rows.append(r.copy())
        rows.append(-r)
    for i in range(nm):
        r = np.zeros(n)
        if i > 0:
            r[i - 1] = 1.0 / compression
        r[i] = -1.0 / compression
        rows.append(r)
    return Constraints(
        H=np.array(rows),
        u_min=np.array([-u_max]),
        u_max=np.array([u_max]),
    )


@dataclass(frozen=True)
class GaussianNoise:
    """Zero-mean Gaussian noise with exact covariance sigma_w."""

    sigma_w: np.ndarray

    def __post_init__(self):
        S = np.atleast_2d(np.asarray(self.sigma_w, dtype=float))
        if np.linalg.eigvalsh(S).min() <= 0:
            raise ConfigurationError("covariance must be positive definite")
        object.__setattr__(self, "sigma_w", S)
        object.__setattr__(self, "_chol", np.linalg.cholesky(S))

    @property
    def q(self):
        return self.sigma_w.shape[0]

    def sample(self, rng, size=None):
        if size is None:
            return self._chol @ rng.standard_normal(self.q)
        return rng.standard_normal((size, self.q)) @ self._chol.T


@dataclass(frozen=True)
class DiscreteThreePointNoise:
    """Per-channel support {-c, 0, +c} with P{0} = zero_prob.

    c = sigma / sqrt(1 - zero_prob) so the second moment equals variance
    exactly; this is the worst-case family for a Markov bound built from
    second moments only.
    """

    variance: float
    zero_prob: float
    q: int = 3

    def __post_init__(self):
        if not 0.0 < self.zero_prob < 1.0:
            raise ConfigurationError("zero_prob must lie in (0, 1)")
        if self.variance <= 0:
            raise ConfigurationError("variance must be positive")

    @property
    def support_value(self):
        return np.sqrt(self.variance / (1.0 - self.zero_prob))

    @property
    def sigma_w(self):
        return self.variance * np.eye(self.q)

    @property
    def outcome_probs(self):
        half = 0.5 * (1.0 - self.zero_prob)
        return np.array([half, self.zero_prob, half])

    def sample(self, rng, size=None):
        c = self.support_value
        shape = (self.q,) if size is None else (size, self.q)
        u = rng.random(shape)
        half = 0.5 * (1.0 - self.zero_prob)
        return np.where(u < half, -c, np.where(u < 2 * half, c, 0.0))


@dataclass(frozen=True)
class ZeroNoise:
    """Degenerate w = 0 distribution (the sigma_w -> 0 limit)."""

    q: int = 3

    @property
    def sigma_w(self):
        return np.zeros((self.q, self.q))

    def sample(self, rng, size=None):
        shape = (self.q,) if size is None else (size, self.q)
        return np.zeros(shape)


def sample_noise(noise_model, rng, size=None):
    """Draw one (or `size`) noise vector(s) from a caller-owned stream."""
    return noise_model.sample(rng, size=size)


def realization_rng(master_seed, index):
    """Counter-based stream for one Monte Carlo realization.

    Streams derived from (master_seed, index) are independent and do not
    depend on the order realizations are simulated in.
    """
    return np.random.default_rng(np.random.SeedSequence(master_seed, spawn_key=(index,)))
