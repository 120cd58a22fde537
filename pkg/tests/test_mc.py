import numpy as np
import pytest

from scmpc.mc import (
    ClosedLoopReport,
    ExperimentConfig,
    PeriodicForcing,
    ZeroInput,
    closed_loop_experiment,
    containment_estimator,
    open_loop_experiment,
    wilson_interval,
)
from scmpc.model import DiscreteThreePointNoise, GaussianNoise, ZeroNoise
from scmpc.prs import PrsSchedule, terminal_ingredients, tighten

SIGMA_W = 1e-3 * np.eye(3)
P_LEVEL = 0.95


@pytest.fixture(scope="module")
def setup(bench_design):
    chain, cons, cert = bench_design
    sched = PrsSchedule(cert=cert, p=P_LEVEL, K=400)
    tc = tighten(cons, cert, sched)
    ti = terminal_ingredients(cert, np.eye(6), cons, sched)
    return chain, cons, cert, tc, ti


def test_wilson_all_successes():
    freq, lo, hi = wilson_interval(100, 100)
    assert freq == 1.0
    # frozen from the closed-form score interval
    assert lo == pytest.approx(0.9630065017930143, abs=1e-12)
    assert hi == pytest.approx(1.0, abs=1e-12)


def test_wilson_half():
    freq, lo, hi = wilson_interval(2, 4)
    assert freq == 0.5
    assert lo < 0.5 < hi


def test_wilson_straddles_nominal():
    freq, lo, hi = wilson_interval(95, 100)
    assert freq == pytest.approx(0.95)
    assert lo < 0.95 < hi


def test_containment_estimator_wraps_wilson():
    flags = np.array([True] * 95 + [False] * 5)
    freq, lo, hi = containment_estimator(flags)
    f2, l2, h2 = wilson_interval(95, 100)
    assert (freq, lo, hi) == (f2, l2, h2)


def test_periodic_forcing_shape():
    sig = PeriodicForcing(amplitude=1000.0, period=12.5)
    # one full period at dt = 0.25 is 50 steps
    assert sig.input_at(0, 0.25)[0] == 0.0
    assert sig.input_at(50, 0.25)[0] == pytest.approx(0.0, abs=1e-9)
    assert abs(sig.input_at(12, 0.25)[0]) <= 1000.0
    with pytest.raises(ValueError):
        PeriodicForcing(amplitude=-1.0)


def test_config_validation():
    with pytest.raises(ValueError):
        ExperimentConfig(n_realizations=10)


def test_open_loop_zero_noise_has_zero_error(setup):
    chain, cons, cert, tc, ti = setup
    cfg = ExperimentConfig(n_realizations=100, T=20, signal=PeriodicForcing(),
                           master_seed=1)
    rep = open_loop_experiment(cfg, chain, cert, ZeroNoise(), P_LEVEL)
    assert np.all(rep.mean_err == 0.0)
    assert np.all(rep.containment == 1.0)


@pytest.mark.parametrize("noise", [
    GaussianNoise(sigma_w=SIGMA_W),
    DiscreteThreePointNoise(variance=1e-3, zero_prob=0.9999),
], ids=["gaussian", "three-point-q0.9999"])
def test_open_loop_bound_and_containment(setup, noise):
    chain, cons, cert, tc, ti = setup
    cfg = ExperimentConfig(n_realizations=1000, T=60, signal=PeriodicForcing(),
                           master_seed=2)
    rep = open_loop_experiment(cfg, chain, cert, noise, P_LEVEL)
    assert rep.bound_holds(slack_sigmas=3.0)
    assert rep.containment_above(P_LEVEL, z=3.0)


def test_open_loop_deterministic_and_chunk_independent(setup):
    chain, cons, cert, tc, ti = setup
    noise = GaussianNoise(sigma_w=SIGMA_W)
    cfg_a = ExperimentConfig(n_realizations=300, T=25, master_seed=5, chunk=64)
    ra = open_loop_experiment(cfg_a, chain, cert, noise, P_LEVEL)
    rb = open_loop_experiment(cfg_a, chain, cert, noise, P_LEVEL)
    np.testing.assert_array_equal(ra.mean_err, rb.mean_err)  # replay is bitwise
    # a different chunking regroups the accumulator sums: same statistics
    # up to summation rounding, identical containment counts
    cfg_c = ExperimentConfig(n_realizations=300, T=25, master_seed=5, chunk=300)
    rc = open_loop_experiment(cfg_c, chain, cert, noise, P_LEVEL)
    np.testing.assert_allclose(ra.mean_err, rc.mean_err, rtol=1e-12, atol=1e-18)
    np.testing.assert_array_equal(ra.containment, rc.containment)


def test_forced_error_exceeds_unforced(setup):
    # input-dependence of the error statistics: the forced run works the
    # nonlinearity, the unforced run stays near the linearization point
    chain, cons, cert, tc, ti = setup
    noise = GaussianNoise(sigma_w=SIGMA_W)
    cfg_f = ExperimentConfig(n_realizations=400, T=80, signal=PeriodicForcing(),
                             master_seed=3)
    cfg_0 = ExperimentConfig(n_realizations=400, T=80, signal=ZeroInput(),
                             master_seed=3)
    rep_f = open_loop_experiment(cfg_f, chain, cert, noise, P_LEVEL)
    rep_0 = open_loop_experiment(cfg_0, chain, cert, noise, P_LEVEL)
    assert rep_f.mean_err[-1] > rep_0.mean_err[-1]


def test_open_loop_csv(tmp_path, setup):
    chain, cons, cert, tc, ti = setup
    cfg = ExperimentConfig(n_realizations=100, T=10, master_seed=4)
    rep = open_loop_experiment(cfg, chain, cert, GaussianNoise(sigma_w=SIGMA_W), P_LEVEL)
    path = tmp_path / "ol.csv"
    rep.to_csv(path)
    lines = path.read_text().strip().split("\n")
    assert lines[0] == "# schema=1"
    assert lines[1] == "k,mean_err_M2,bound,containment,wilson_lo,wilson_hi"
    assert len(lines) == 2 + 11


def test_closed_loop_small_experiment(setup):
    chain, cons, cert, tc, ti = setup
    noise = DiscreteThreePointNoise(variance=1e-3, zero_prob=0.9995)
    cfg = ExperimentConfig(n_realizations=100, T=25, master_seed=6, chunk=50,
                           threads=2)
    x0 = np.array([0.0, 0, 10, 0, 0, 0])
    rep = closed_loop_experiment(cfg, chain, tc, ti, 50, np.eye(6), 0.01 * np.eye(1),
                                 noise, x0)
    assert rep.hard_failures == 0
    assert rep.nominal_feasible
    assert rep.total_fallback_rate <= 0.01
    assert rep.chance_constraints_above(P_LEVEL, z=3.0)
    assert rep.mean_stage_cost.shape == (25,)
    assert rep.p_in_X.shape == (26,)


def test_closed_loop_worker_count_invariance(setup):
    chain, cons, cert, tc, ti = setup
    noise = GaussianNoise(sigma_w=SIGMA_W)
    x0 = np.array([0.0, 0, 10, 0, 0, 0])
    cfg1 = ExperimentConfig(n_realizations=100, T=10, master_seed=8, chunk=50,
                            threads=1)
    cfg2 = ExperimentConfig(n_realizations=100, T=10, master_seed=8, chunk=50,
                            threads=2)
    r1 = closed_loop_experiment(cfg1, chain, tc, ti, 50, np.eye(6), 0.01 * np.eye(1),
                                noise, x0)
    r2 = closed_loop_experiment(cfg2, chain, tc, ti, 50, np.eye(6), 0.01 * np.eye(1),
                                noise, x0)
    np.testing.assert_array_equal(r1.mean_stage_cost, r2.mean_stage_cost)
    np.testing.assert_array_equal(r1.p_in_X, r2.p_in_X)
