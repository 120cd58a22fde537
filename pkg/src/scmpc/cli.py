"""Command-line orchestration: design, simulate, validate, reproduce.

Configuration is a single INI file (sections: model, noise, design, mpc,
experiment); see DEFAULT_CONFIG for a fully annotated default matching the
benchmark study.  All randomness flows from the configured seed.  Exit
codes: 0 success, 1 malformed config or missing file, 2 no feasible
contraction rate, 3 certificate not ready for control (tightening would
exceed the constraints), 4 validation checks failed.
"""

from __future__ import annotations

import argparse
import configparser
import os
import sys

import numpy as np

from .mc import (
    ExperimentConfig,
    PeriodicForcing,
    ZeroInput,
    closed_loop_experiment,
    open_loop_experiment,
)
from .metric import (
    ContractionCertificate,
    NoFeasibleRho,
    RhoSearchConfig,
    design_metric,
    verify_certificate,
)
from .model import (
    DiscreteThreePointNoise,
    GaussianNoise,
    MassSpringDamperChain,
    ZeroNoise,
    chain_constraints,
)
from .prs import (
    EmptyTightenedSet,
    PrsSchedule,
    export_tightening_csv,
    terminal_ingredients,
    tighten,
)
from .shrinking import ScenarioTree, ShrinkingSetup, validate_cost_monotonicity
from .smpc import InitialInfeasibility, SmpcController, run_closed_loop
from .model import Constraints, LinearSystem

DEFAULT_CONFIG = """\
# Benchmark toolkit configuration (INI).  Units are SI throughout.

[model]
n_masses = 3
mass = 5.0                ; kg
spring = 2.0              ; N/m
damper = 1.0              ; N s/m
dt = 0.25                 ; s (forward Euler)
friction_force = 14.0     ; N, smooth Coulomb saturation level
friction_velocity = 0.7   ; m/s, velocity scale of the tanh friction law
v_max = 2.0               ; m/s velocity limit per mass
compression = 1.0         ; m, max spring compression
u_max = 100.0             ; N actuator bound (box [-u_max, u_max])

[noise]
kind = three_point        ; gaussian | three_point | zero
variance = 1e-3           ; per-channel variance (covariance = variance * I)
zero_prob = 0.9995        ; P{w_i = 0} for the three-point family

[design]
p = 0.95                  ; chance-constraint probability level
rho_min = 0.5
rho_max = 0.9999
grid_points = 25
refine_tol = 1e-4
tol_psd = 1e-8
tol_obj = 1e-7

[mpc]
N = 50                    ; prediction horizon (steps)
q_diag = 1 1 1 1 1 1
r_diag = 0.01
T = 100                   ; closed-loop steps
x0_offset = 10.0          ; initial displacement of the last mass [m]

[experiment]
realizations = 10000      ; open-loop Monte Carlo sample size
closed_loop_realizations = 1000
seed = 2024
signal = periodic         ; periodic | zero
amplitude = 1000.0        ; N
period = 12.5             ; s
T_open = 160              ; open-loop steps
"""

REQUIRED = {
    "model": ["n_masses", "mass", "spring", "damper", "dt", "friction_force",
              "friction_velocity", "v_max", "compression", "u_max"],
    "noise": ["kind", "variance"],
    "design": ["p", "rho_min", "rho_max", "grid_points", "refine_tol",
               "tol_psd", "tol_obj"],
    "mpc": ["N", "q_diag", "r_diag", "T", "x0_offset"],
    "experiment": ["realizations", "closed_loop_realizations", "seed",
                   "signal", "amplitude", "period", "T_open"],
}


class ConfigError(ValueError):
    pass


class ToolkitConfig:
    """Parsed and validated configuration."""

    def __init__(self, parser):
        for section, keys in REQUIRED.items():
            if section not in parser:
                raise ConfigError(f"missing section [{section}]")
            for key in keys:
                if key not in parser[section]:
                    raise ConfigError(f"missing key '{key}' in section [{section}]")
        m = parser["model"]
        self.chain = MassSpringDamperChain(
            n_masses=m.getint("n_masses"),
            mass=m.getfloat("mass"),
            spring=m.getfloat("spring"),
            damper=m.getfloat("damper"),
            dt=m.getfloat("dt"),
            friction_force=m.getfloat("friction_force"),
            friction_velocity=m.getfloat("friction_velocity"),
        )
        self.cons = chain_constraints(
            self.chain, v_max=m.getfloat("v_max"),
            compression=m.getfloat("compression"), u_max=m.getfloat("u_max"),
        )
        nz = parser["noise"]
        kind = nz.get("kind").strip()
        variance = nz.getfloat("variance")
        if variance <= 0:
            raise ConfigError("noise variance must be positive")
        q = self.chain.q
        self.sigma_w = variance * np.eye(q)
        if kind == "gaussian":
            self.noise = GaussianNoise(sigma_w=self.sigma_w)
        elif kind == "three_point":
            if "zero_prob" not in nz:
                raise ConfigError("three_point noise needs 'zero_prob'")
            self.noise = DiscreteThreePointNoise(
                variance=variance, zero_prob=nz.getfloat("zero_prob"), q=q)
        elif kind == "zero":
            self.noise = ZeroNoise(q=q)
        else:
            raise ConfigError(f"unknown noise kind '{kind}'")
        d = parser["design"]
        self.p = d.getfloat("p")
        if not 0.0 < self.p < 1.0:
            raise ConfigError("probability level p must lie in (0, 1)")
        self.search = RhoSearchConfig(
            rho_min=d.getfloat("rho_min"), rho_max=d.getfloat("rho_max"),
            grid_points=d.getint("grid_points"), refine_tol=d.getfloat("refine_tol"),
            tol_psd=d.getfloat("tol_psd"), tol_obj=d.getfloat("tol_obj"),
        )
        mp = parser["mpc"]
        self.N = mp.getint("N")
        q_diag = [float(v) for v in mp.get("q_diag").split()]
        if len(q_diag) == 1:
            q_diag = q_diag * self.chain.n
        if len(q_diag) != self.chain.n:
            raise ConfigError("q_diag must have one value per state")
        self.Q = np.diag(q_diag)
        r_diag = [float(v) for v in mp.get("r_diag").split()]
        self.R = np.diag(r_diag if len(r_diag) == self.chain.m else r_diag * self.chain.m)
        self.T = mp.getint("T")
        self.x0 = np.zeros(self.chain.n)
        self.x0[self.chain.n_masses - 1] = mp.getfloat("x0_offset")
        e = parser["experiment"]
        self.realizations = e.getint("realizations")
        self.closed_loop_realizations = e.getint("closed_loop_realizations")
        self.seed = e.getint("seed")
        sig = e.get("signal").strip()
        if sig == "periodic":
            self.signal = PeriodicForcing(amplitude=e.getfloat("amplitude"),
                                          period=e.getfloat("period"))
        elif sig == "zero":
            self.signal = ZeroInput()
        else:
            raise ConfigError(f"unknown signal '{sig}'")
        self.T_open = e.getint("T_open")


def load_config(path) -> ToolkitConfig:
    if not os.path.exists(path):
        raise ConfigError(f"config file not found: {path}")
    parser = configparser.ConfigParser(inline_comment_prefixes=(";", "#"))
    try:
        with open(path) as fh:
            parser.read_file(fh, source=path)
    except configparser.Error as exc:
        # configparser reports file and line numbers in its message
        raise ConfigError(str(exc)) from exc
    return ToolkitConfig(parser)


def _pipeline_pieces(cfg: ToolkitConfig, cert):
    sched = PrsSchedule(cert=cert, p=cfg.p, K=cfg.T + cfg.N + cfg.T_open)
    tc = tighten(cfg.cons, cert, sched)
    ti = terminal_ingredients(cert, cfg.Q, cfg.cons, sched)
    return sched, tc, ti


def _write_tightening_csv(cfg, cert, sched, tc, path):
    export_tightening_csv(tc, path, K=cfg.T + cfg.N)


def _summary(line):
    print(line)


def _diag(msg):
    print(msg, file=sys.stderr)


def cmd_design(args):
    try:
        cfg = load_config(args.config)
    except ConfigError as exc:
        _diag(f"config error: {exc}")
        return 1
    os.makedirs(args.out, exist_ok=True)
    debug_log = (os.path.join(args.out, "sdp_iterates.csv")
                 if getattr(args, "sdp_debug", False) else None)
    try:
        cert = design_metric(cfg.chain, cfg.cons, cfg.sigma_w, cfg.p,
                             search_cfg=cfg.search,
                             workers=getattr(args, "threads", None) or 1,
                             iterate_log=debug_log)
    except NoFeasibleRho as exc:
        _diag(f"design failed: {exc}")
        _summary("design status=no_feasible_rho")
        return 2
    cert_path = os.path.join(args.out, "certificate.json")
    cert.save(cert_path)
    if not cert.smpc_ready:
        _diag("certificate is not smpc-ready: tr(X) > (1-rho)(1-p)")
        _summary(f"design status=not_ready rho={cert.rho:.6f} wbar={cert.wbar:.6e}")
        return 3
    try:
        sched, tc, ti = _pipeline_pieces(cfg, cert)
    except EmptyTightenedSet as exc:
        _diag(f"tightening failed: {exc}")
        _summary(f"design status=empty_tightened_set rho={cert.rho:.6f}")
        return 3
    _write_tightening_csv(cfg, cert, sched, tc, os.path.join(args.out, "tightening.csv"))
    with open(os.path.join(args.out, "terminal.json"), "w") as fh:
        import json
        json.dump({"c_f": ti.c_f, "alpha_f": ti.alpha_f,
                   "P": ti.P.reshape(-1).tolist()}, fh, indent=1)
    _summary(
        f"design status=ok rho={cert.rho:.6f} wbar={cert.wbar:.6e} "
        f"objective={cert.objective:.6e} alpha_f={ti.alpha_f:.6f} "
        f"certificate={cert_path}"
    )
    return 0


def _load_certificate(path):
    if not os.path.exists(path):
        raise ConfigError(f"certificate file not found: {path}")
    return ContractionCertificate.load(path)


def cmd_simulate(args):
    try:
        cfg = load_config(args.config)
        cert = _load_certificate(args.certificate)
    except (ConfigError, ValueError, KeyError) as exc:
        _diag(f"error: {exc}")
        return 1
    os.makedirs(args.out, exist_ok=True)
    seed = cfg.seed if args.seed is None else args.seed
    noise = ZeroNoise(q=cfg.chain.q) if args.zero_noise else cfg.noise
    try:
        sched, tc, ti = _pipeline_pieces(cfg, cert)
    except EmptyTightenedSet as exc:
        _diag(f"tightening failed: {exc}")
        return 3
    ctrl = SmpcController(model=cfg.chain, tightened=tc, terminal=ti,
                          N=cfg.N, Q=cfg.Q, R=cfg.R)
    try:
        trace = run_closed_loop(ctrl, cfg.chain, noise, cfg.x0, cfg.T, seed)
    except InitialInfeasibility as exc:
        _diag(f"simulation failed: {exc}")
        return 4
    path = os.path.join(args.out, "trace.csv")
    trace.to_csv(path)
    _summary(
        f"simulate status=ok steps={trace.T} fallbacks={int(trace.fallback.sum())} "
        f"final_cost={trace.stage_cost[-1]:.6e} trace={path}"
    )
    return 0


def _validation_noises(cfg):
    var = float(np.diag(cfg.sigma_w).mean())
    q = cfg.chain.q
    return {
        "gaussian": GaussianNoise(sigma_w=cfg.sigma_w),
        "three_point_q0.99": DiscreteThreePointNoise(variance=var, zero_prob=0.99, q=q),
        "three_point_q0.9999": DiscreteThreePointNoise(variance=var, zero_prob=0.9999, q=q),
    }


def cmd_validate(args):
    try:
        cfg = load_config(args.config)
        cert = _load_certificate(args.certificate)
    except (ConfigError, ValueError, KeyError) as exc:
        _diag(f"error: {exc}")
        return 1
    os.makedirs(args.out, exist_ok=True)
    if getattr(args, "seed", None) is not None:
        cfg.seed = args.seed
    n_real = args.realizations or (100 if args.fast else cfg.realizations)

    report = verify_certificate(cert, cfg.chain, n_samples=10_000,
                                u_box=(cfg.cons.u_min[0], cfg.cons.u_max[0]))
    ok = report.passed
    if not ok:
        _diag(
            f"certificate verification failed: vertex={report.max_vertex_residual:.3e} "
            f"sampled={report.max_sampled_residual:.3e} trace={report.trace_residual:.3e}"
        )
    checks = []
    for name, noise in _validation_noises(cfg).items():
        mc_cfg = ExperimentConfig(n_realizations=n_real, T=cfg.T_open,
                                  signal=cfg.signal, master_seed=cfg.seed)
        rep = open_loop_experiment(mc_cfg, cfg.chain, cert, noise, cfg.p)
        rep.to_csv(os.path.join(args.out, f"openloop_{name}.csv"))
        checks.append((name, rep.bound_holds(), rep.containment_above(cfg.p)))
        if not (checks[-1][1] and checks[-1][2]):
            _diag(f"open-loop check failed for {name}: bound={checks[-1][1]} "
                  f"containment={checks[-1][2]}")
    all_ok = ok and all(b and c for _, b, c in checks)
    _summary(
        "validate status=" + ("ok" if all_ok else "failed")
        + f" certificate_ok={int(ok)} realizations={n_real}"
        + "".join(f" {n}={int(b and c)}" for n, b, c in checks)
    )
    return 0 if all_ok else 4


def _toy_shrinking_report(out_dir):
    """Scalar shrinking-horizon validation at fixed toy constants."""
    sys_toy = LinearSystem(A=np.array([[0.8]]), B=np.array([[1.0]]),
                           G=np.array([[1.0]]))
    cons = Constraints(H=np.array([[1.0]]), u_min=[-1.0], u_max=[1.0])
    cfg = RhoSearchConfig(rho_min=0.3, rho_max=0.95)
    cert = design_metric(sys_toy, cons, np.array([[1e-4]]), p=0.9, search_cfg=cfg)
    c = 0.01
    tree = ScenarioTree(values=np.array([[-c], [c]]), probs=np.array([0.5, 0.5]), N=3)
    sched = PrsSchedule(cert=cert, p=0.9, K=4)
    ti = terminal_ingredients(cert, np.eye(1), cons, sched)
    setup = ShrinkingSetup(model=sys_toy, cons=cons, cert=cert, p=0.9,
                           Q=np.eye(1), R=np.eye(1), P=ti.P, tree=tree)
    report = validate_cost_monotonicity(setup, np.array([0.5]))
    report.to_csv(os.path.join(out_dir, "shrinking_report.csv"))
    return report


def cmd_reproduce(args):
    try:
        cfg = load_config(args.config)
    except ConfigError as exc:
        _diag(f"config error: {exc}")
        return 1
    os.makedirs(args.out, exist_ok=True)
    if getattr(args, "seed", None) is not None:
        cfg.seed = args.seed
    cert_path = os.path.join(args.out, "certificate.json")

    # offline design, skipped when the stored certificate is fresh
    if os.path.exists(cert_path) and os.path.getmtime(cert_path) >= os.path.getmtime(args.config):
        _diag("reusing fresh certificate (skip design)")
        cert = _load_certificate(cert_path)
        sched, tc, ti = _pipeline_pieces(cfg, cert)
        _write_tightening_csv(cfg, cert, sched, tc,
                              os.path.join(args.out, "tightening.csv"))
    else:
        rc = cmd_design(argparse.Namespace(config=args.config, out=args.out,
                                           threads=args.threads, sdp_debug=False))
        if rc != 0:
            return rc
        cert = _load_certificate(cert_path)
        sched, tc, ti = _pipeline_pieces(cfg, cert)

    n_open = args.realizations or (100 if args.fast else cfg.realizations)
    n_closed = args.realizations or (100 if args.fast else cfg.closed_loop_realizations)
    threads = args.threads or os.cpu_count() or 1

    # open-loop experiments for both input signals and the noise family
    open_loop_ok = True
    for sig_name, signal in [("forced", PeriodicForcing()), ("zero", ZeroInput())]:
        for name, noise in _validation_noises(cfg).items():
            mc_cfg = ExperimentConfig(n_realizations=n_open, T=cfg.T_open,
                                      signal=signal, master_seed=cfg.seed)
            rep = open_loop_experiment(mc_cfg, cfg.chain, cert, noise, cfg.p)
            rep.to_csv(os.path.join(args.out, f"openloop_{sig_name}_{name}.csv"))
            ok_here = rep.bound_holds() and rep.containment_above(cfg.p)
            if not ok_here:
                _diag(f"open-loop checks failed for {sig_name}/{name}")
            open_loop_ok &= ok_here

    # closed-loop statistics
    mc_cfg = ExperimentConfig(n_realizations=n_closed, T=cfg.T,
                              master_seed=cfg.seed, threads=threads,
                              chunk=max(1, n_closed // max(1, 2 * threads)))
    cl = closed_loop_experiment(mc_cfg, cfg.chain, tc, ti, cfg.N, cfg.Q, cfg.R,
                                cfg.noise, cfg.x0)
    cl.to_csv(os.path.join(args.out, "closedloop_stats.csv"))

    # a few representative traces for the figure component
    ctrl = SmpcController(model=cfg.chain, tightened=tc, terminal=ti,
                          N=cfg.N, Q=cfg.Q, R=cfg.R)
    for rep_idx in range(5):
        trace = run_closed_loop(ctrl, cfg.chain, cfg.noise, cfg.x0, cfg.T,
                                cfg.seed, realization=rep_idx)
        trace.to_csv(os.path.join(args.out, f"trace_rep{rep_idx}.csv"))

    shrink = _toy_shrinking_report(args.out)

    ok = (open_loop_ok and cl.hard_failures == 0 and cl.nominal_feasible
          and cl.total_fallback_rate <= 0.01
          and cl.chance_constraints_above(cfg.p)
          and shrink.reoptimization_improves)
    _summary(
        "reproduce status=" + ("ok" if ok else "failed")
        + f" open_realizations={n_open} closed_realizations={n_closed}"
        + f" fallback_rate={cl.total_fallback_rate:.4f}"
        + f" shrinking_gap={shrink.expected_cost_open - shrink.expected_cost_closed:.3e}"
        + f" out={args.out}"
    )
    return 0 if ok else 4


def main(argv=None):
    parser = argparse.ArgumentParser(
        prog="scmpc",
        description="stochastic MPC toolkit: offline design, simulation, validation",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p_design = sub.add_parser("design", help="offline contraction-metric design")
    p_design.add_argument("--config", required=True)
    p_design.add_argument("--out", required=True)
    p_design.add_argument("--threads", type=int, default=None,
                          help="parallel rate-grid candidates")
    p_design.add_argument("--sdp-debug", action="store_true",
                          help="dump the final solve's barrier iterates to CSV")
    p_design.set_defaults(func=cmd_design)

    p_sim = sub.add_parser("simulate", help="one closed-loop realization")
    p_sim.add_argument("--config", required=True)
    p_sim.add_argument("--certificate", required=True)
    p_sim.add_argument("--out", required=True)
    p_sim.add_argument("--seed", type=int, default=None)
    p_sim.add_argument("--zero-noise", action="store_true")
    p_sim.set_defaults(func=cmd_simulate)

    p_val = sub.add_parser("validate", help="verify certificate and open-loop bounds")
    p_val.add_argument("--config", required=True)
    p_val.add_argument("--certificate", required=True)
    p_val.add_argument("--out", required=True)
    p_val.add_argument("--realizations", type=int, default=None)
    p_val.add_argument("--seed", type=int, default=None)
    p_val.add_argument("--fast", action="store_true")
    p_val.set_defaults(func=cmd_validate)

    p_rep = sub.add_parser("reproduce", help="full pipeline with all outputs")
    p_rep.add_argument("--config", required=True)
    p_rep.add_argument("--out", required=True)
    p_rep.add_argument("--seed", type=int, default=None)
    p_rep.add_argument("--realizations", type=int, default=None)
    p_rep.add_argument("--threads", type=int, default=None)
    p_rep.add_argument("--fast", action="store_true")
    p_rep.set_defaults(func=cmd_reproduce)

    args = parser.parse_args(argv)
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
