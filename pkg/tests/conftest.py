import numpy as np
import pytest

from scmpc.metric import design_metric
from scmpc.model import MassSpringDamperChain, chain_constraints

BENCH_SIGMA_W = 1e-3 * np.eye(3)


@pytest.fixture(scope="session")
def bench_design():
    """One offline benchmark design shared across the whole suite."""
    chain = MassSpringDamperChain()
    cons = chain_constraints(chain)
    cert = design_metric(chain, cons, BENCH_SIGMA_W, p=0.95)
    return chain, cons, cert
