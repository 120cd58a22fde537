"""Offline contraction-metric design via LMIs on a convex Jacobian embedding.

The Jacobian of the nominal dynamics is written as an affine combination
A(x,u) = A0 + sum_i theta_i(x,u) * Ai with theta ranging over a box, so the
contraction LMI only needs to hold at the box vertices.  For a fixed
contraction rate rho the design is a semidefinite program over (W, X) with
W = M^-1; rho itself is chosen by a coarse grid plus golden-section
refinement of the tightening objective tr(X) / (1 - rho).
"""

from __future__ import annotations

import itertools
import json
from dataclasses import dataclass, field

import numpy as np

from .model import UnboundedJacobian
from .sdp import SdpProblem, SdpStatus, solve_sdp, sym_basis, sym_to_vec, vec_to_sym

EPS_PD = 1e-6  # W >= EPS_PD * I stands in for strict positivity


class NoFeasibleRho(RuntimeError):
    """No contraction rate in the searched interval admits a certificate."""


@dataclass(frozen=True)
class JacobianEmbedding:
    """Affine enclosure A(x,u) = A0 + sum_i theta_i * basis_i, theta in a box."""

    A0: np.ndarray
    basis: tuple
    bounds: np.ndarray  # (n_theta, 2) box for theta
    model: object = field(repr=False)

    @property
    def n_theta(self):
        return len(self.basis)

    def vertices(self):
        if self.n_theta == 0:
            return [np.array(self.A0, copy=True)]
        out = []
        for corner in itertools.product(*[(lo, hi) for lo, hi in self.bounds]):
            A = np.array(self.A0, copy=True)
            for t, Ai in zip(corner, self.basis):
                A = A + t * Ai
            out.append(A)
        return out

    def reconstruct(self, x, u):
        theta = self.model.theta(x, u)
        A = np.array(self.A0, copy=True)
        for t, Ai in zip(theta, self.basis):
            A = A + t * Ai
        return A

    def theta_in_box(self, x, u, tol=1e-9):
        theta = self.model.theta(x, u)
        return bool(
            np.all(theta >= self.bounds[:, 0] - tol) and np.all(theta <= self.bounds[:, 1] + tol)
        )


def build_embedding(model) -> JacobianEmbedding:
    """Extract the model's affine Jacobian structure and its theta box."""
    try:
        A0, basis, bounds = model.jacobian_basis()
    except AttributeError as exc:
        raise UnboundedJacobian(
            f"{type(model).__name__} does not expose a bounded Jacobian basis"
        ) from exc
    bounds = np.atleast_2d(np.asarray(bounds, dtype=float)).reshape(-1, 2)
    if len(basis) != bounds.shape[0]:
        raise ValueError("basis/bounds length mismatch")
    if not np.all(np.isfinite(bounds)):
        raise UnboundedJacobian("theta box is unbounded")
    return JacobianEmbedding(A0=np.asarray(A0, dtype=float), basis=tuple(basis), bounds=bounds, model=model)


@dataclass
class ContractionCertificate:
    """Constant contraction metric with its SDP witnesses.

    M = W^-1 certifies A(x,u)^T M A(x,u) <= rho M globally (via the
    embedding vertices) and wbar = tr(X) bounds the expected per-step
    energy injection tr(sigma_w G^T M G).
    """

    n: int
    M: np.ndarray
    W: np.ndarray
    rho: float
    wbar: float
    X: np.ndarray
    sigma_w: np.ndarray
    p: float
    smpc_ready: bool
    objective: float

    def energy(self, e):
        """Squared M-weighted norm of an error vector (batched on axis 0)."""
        e = np.asarray(e, dtype=float)
        if e.ndim == 1:
            return float(e @ self.M @ e)
        return np.einsum("ki,ij,kj->k", e, self.M, e)

    def to_dict(self):
        return {
            "n": self.n,
            "M": self.M.reshape(-1).tolist(),
            "W": self.W.reshape(-1).tolist(),
            "rho": self.rho,
            "wbar": self.wbar,
            "X": self.X.reshape(-1).tolist(),
            "sigma_w": self.sigma_w.reshape(-1).tolist(),
            "p": self.p,
            "smpc_ready": self.smpc_ready,
            "objective": self.objective,
        }

    @classmethod
    def from_dict(cls, d):
        n = int(d["n"])
        q = int(round(np.sqrt(len(d["X"]))))
        return cls(
            n=n,
            M=np.array(d["M"], dtype=float).reshape(n, n),
            W=np.array(d["W"], dtype=float).reshape(n, n),
            rho=float(d["rho"]),
            wbar=float(d["wbar"]),
            X=np.array(d["X"], dtype=float).reshape(q, q),
            sigma_w=np.array(d["sigma_w"], dtype=float).reshape(q, q),
            p=float(d["p"]),
            smpc_ready=bool(d["smpc_ready"]),
            objective=float(d["objective"]),
        )

    def save(self, path):
        with open(path, "w") as fh:
            json.dump(self.to_dict(), fh, indent=1)

    @classmethod
    def load(cls, path):
        with open(path) as fh:
            return cls.from_dict(json.load(fh))


def _sym_sqrt(S):
    vals, vecs = np.linalg.eigh(S)
    return vecs @ np.diag(np.sqrt(np.clip(vals, 0.0, None))) @ vecs.T


def _noise_block_scale(G, sigma_w):
    """Congruence scale s for the noise block so the X variable is O(1).

    The block [[X, (G S^.5)^T], [G S^.5, W]] >= 0 is equivalent to
    [[X/s, (G S^.5)^T/sqrt(s)], [., W]] >= 0; solving in X/s removes the
    10^10 conditioning gap between tiny tr(X) values and O(1) metrics.
    """
    GS = np.asarray(G, dtype=float) @ _sym_sqrt(np.atleast_2d(sigma_w))
    s = float(np.linalg.norm(GS, 2) ** 2)
    return max(s, 1e-300)


def assemble_lmis(emb: JacobianEmbedding, rho, cons, sigma_w, G, eps_pd=EPS_PD) -> SdpProblem:
    """SDP over (W, X) certifying contraction at rate rho.

    Blocks: one per constraint row ([[W, W h], [h^T W, 1]]), one per
    embedding vertex ([[rho W, (A W)^T], [A W, W]]), the noise coupling
    [[X, (G S^1/2)^T], [G S^1/2, W]], and strict positivity W >= eps_pd I.
    Objective is tr(X); the 1/(1-rho) factor is constant at fixed rho.
    """
    n = emb.A0.shape[0]
    G = np.asarray(G, dtype=float)
    q = G.shape[1]
    w_basis = sym_basis(n)
    x_basis = sym_basis(q)
    dW, dX = len(w_basis), len(x_basis)
    d = dW + dX

    blocks = []

    for h in np.atleast_2d(cons.H):
        F0 = np.zeros((n + 1, n + 1))
        F0[n, n] = 1.0
        Fs = np.zeros((d, n + 1, n + 1))
        for k, E in enumerate(w_basis):
            Fs[k, :n, :n] = E
            Fs[k, :n, n] = E @ h
            Fs[k, n, :n] = E @ h
        blocks.append((F0, Fs))

    for Av in emb.vertices():
        F0 = np.zeros((2 * n, 2 * n))
        Fs = np.zeros((d, 2 * n, 2 * n))
        for k, E in enumerate(w_basis):
            AE = Av @ E
            Fs[k, :n, :n] = rho * E
            Fs[k, :n, n:] = AE.T
            Fs[k, n:, :n] = AE
            Fs[k, n:, n:] = E
        blocks.append((F0, Fs))

    # the decision variable for the noise block is X/s with the block
    # congruence-scaled; the objective keeps original units tr(X)
    s_x = _noise_block_scale(G, sigma_w)
    GS = (G @ _sym_sqrt(np.asarray(sigma_w, dtype=float))) / np.sqrt(s_x)
    F0 = np.zeros((q + n, q + n))
    F0[q:, :q] = GS
    F0[:q, q:] = GS.T
    Fs = np.zeros((d, q + n, q + n))
    for k, E in enumerate(w_basis):
        Fs[k, q:, q:] = E
    for k, E in enumerate(x_basis):
        Fs[dW + k, :q, :q] = E
    blocks.append((F0, Fs))

    F0 = -eps_pd * np.eye(n)
    Fs = np.zeros((d, n, n))
    for k, E in enumerate(w_basis):
        Fs[k] = E
    blocks.append((F0, Fs))

    c = np.concatenate([np.zeros(dW), s_x * sym_to_vec(np.eye(q))])
    # sym_to_vec puts ones on diagonal entries and keeps off-diagonals zero,
    # so c^T y = s * tr(X/s) = tr(X) exactly
    return SdpProblem(c=c, blocks=blocks)


@dataclass(frozen=True)
class RhoSearchConfig:
    rho_min: float = 0.5
    rho_max: float = 0.9999
    grid_points: int = 25
    refine_tol: float = 1e-4
    tol_psd: float = 1e-8
    tol_obj: float = 1e-7
    # grid/golden probes only rank candidates, so they may run looser
    scan_tol_obj: float = 1e-4
    max_iter: int = 200


def _solve_at_rho(emb, rho, cons, sigma_w, G, cfg, tol_obj, iterate_log=None):
    prob = assemble_lmis(emb, rho, cons, sigma_w, G)
    sol = solve_sdp(prob, tol_psd=cfg.tol_psd, tol_obj=tol_obj, max_iter=cfg.max_iter,
                    iterate_log=iterate_log)
    if sol.status is not SdpStatus.OPTIMAL:
        return np.inf, None
    return sol.objective / (1.0 - rho), sol


def design_metric(model, cons, sigma_w, p, search_cfg=None,
                  workers=1, iterate_log=None) -> ContractionCertificate:
    """Minimize tr(X)/(1-rho) over rho by grid + golden-section refinement.

    Raises NoFeasibleRho when every candidate rate is infeasible.  The
    certificate is flagged smpc-ready iff tr(X) <= (1-rho)(1-p), which is
    what guarantees nonempty tightened sets at every step.  With workers>1
    the grid candidates are solved in parallel processes (results are keyed
    by rho, so the outcome does not depend on completion order);
    iterate_log dumps the final solve's barrier path to CSV.
    """
    cfg = search_cfg or RhoSearchConfig()
    emb = build_embedding(model)
    G = np.asarray(model.G, dtype=float)
    sigma_w = np.atleast_2d(np.asarray(sigma_w, dtype=float))

    cache = {}

    def eval_rho(rho):
        if rho not in cache:
            cache[rho] = _solve_at_rho(emb, rho, cons, sigma_w, G, cfg, cfg.scan_tol_obj)
        return cache[rho][0]

    # grid log-spaced in (1 - rho) to resolve rates near one
    lo, hi = 1.0 - cfg.rho_max, 1.0 - cfg.rho_min
    grid = 1.0 - np.exp(np.linspace(np.log(hi), np.log(lo), cfg.grid_points))
    if workers > 1:
        from concurrent.futures import ProcessPoolExecutor

        with ProcessPoolExecutor(max_workers=workers) as pool:
            futures = {rho: pool.submit(_solve_at_rho, emb, rho, cons, sigma_w,
                                        G, cfg, cfg.scan_tol_obj)
                       for rho in grid}
            for rho, fut in futures.items():
                cache[rho] = fut.result()
    values = np.array([eval_rho(r) for r in grid])
    if not np.any(np.isfinite(values)):
        raise NoFeasibleRho(
            f"no feasible contraction rate in [{cfg.rho_min}, {cfg.rho_max}]"
        )
    i_best = int(np.argmin(values))

    a = grid[max(i_best - 1, 0)]
    b = grid[min(i_best + 1, len(grid) - 1)]
    phi = (np.sqrt(5.0) - 1.0) / 2.0
    x1 = b - phi * (b - a)
    x2 = a + phi * (b - a)
    f1, f2 = eval_rho(x1), eval_rho(x2)
    while b - a > cfg.refine_tol:
        if f1 <= f2:
            b, x2, f2 = x2, x1, f1
            x1 = b - phi * (b - a)
            f1 = eval_rho(x1)
        else:
            a, x1, f1 = x1, x2, f2
            x2 = a + phi * (b - a)
            f2 = eval_rho(x2)

    rho_star, obj_star = None, np.inf
    for rho, (obj, sol) in cache.items():
        if sol is not None and obj < obj_star:
            rho_star, obj_star = rho, obj
    # final solve at the tight objective tolerance
    obj_star, sol = _solve_at_rho(emb, rho_star, cons, sigma_w, G, cfg, cfg.tol_obj,
                                  iterate_log=iterate_log)
    if sol is None:
        raise NoFeasibleRho(f"final solve at rho={rho_star} regressed to infeasible")

    n = emb.A0.shape[0]
    q = G.shape[1]
    dW = n * (n + 1) // 2
    W = vec_to_sym(sol.y[:dW], n)
    X = _noise_block_scale(G, sigma_w) * vec_to_sym(sol.y[dW:], q)
    M = np.linalg.inv(W)
    M = 0.5 * (M + M.T)
    wbar = float(np.trace(X))
    return ContractionCertificate(
        n=n,
        M=M,
        W=W,
        rho=float(rho_star),
        wbar=wbar,
        X=X,
        sigma_w=sigma_w,
        p=float(p),
        smpc_ready=bool(wbar <= (1.0 - rho_star) * (1.0 - p)),
        objective=float(obj_star),
    )


@dataclass
class VerificationReport:
    max_vertex_residual: float
    max_sampled_residual: float
    trace_residual: float
    inverse_residual: float
    smpc_ready: bool
    n_samples: int

    @property
    def contraction_ok(self):
        return self.max_vertex_residual <= 1e-8 and self.max_sampled_residual <= 1e-8

    @property
    def passed(self):
        return (
            self.contraction_ok
            and self.trace_residual <= 1e-9
            and self.inverse_residual <= 1e-8
            and self.smpc_ready
        )


def verify_certificate(cert, model, n_samples=10_000, u_box=(-100.0, 100.0), rng=None,
                       pos_range=10.0, vel_range=5.0) -> VerificationReport:
    """Re-check the certificate conditions at vertices and random samples.

    The vertex check is the global one (the Jacobian is affine in theta and
    the box is exact); the sampling box over states and inputs is a
    redundant safety net on the embedding itself.
    """
    rng = rng or np.random.default_rng(0)
    emb = build_embedding(model)
    M, rho = cert.M, cert.rho

    def residual(A):
        return float(np.linalg.eigvalsh(A.T @ M @ A - rho * M).max())

    max_vertex = max(residual(Av) for Av in emb.vertices())

    n = cert.n
    half = n // 2
    max_sample = -np.inf
    for _ in range(n_samples):
        x = np.empty(n)
        x[:half] = rng.uniform(-pos_range, pos_range, size=half)
        x[half:] = rng.uniform(-vel_range, vel_range, size=n - half)
        u = rng.uniform(u_box[0], u_box[1], size=model.m)
        if not emb.theta_in_box(x, u):
            raise UnboundedJacobian("sampled theta left the embedding box")
        max_sample = max(max_sample, residual(model.jacobian(x, u)))

    G = np.asarray(model.G, dtype=float)
    trace_residual = float(np.trace(cert.sigma_w @ G.T @ M @ G) - cert.wbar)
    inverse_residual = float(np.abs(M @ cert.W - np.eye(n)).max())
    return VerificationReport(
        max_vertex_residual=max_vertex,
        max_sampled_residual=max_sample,
        trace_residual=trace_residual,
        inverse_residual=inverse_residual,
        smpc_ready=cert.smpc_ready,
        n_samples=n_samples,
    )
