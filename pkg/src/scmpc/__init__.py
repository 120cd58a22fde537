"""Stochastic MPC toolkit with contraction-metric reachable sets."""

from .metric import ContractionCertificate, NoFeasibleRho, design_metric, verify_certificate
from .model import (
    Constraints,
    DiscreteThreePointNoise,
    GaussianNoise,
    LinearSystem,
    MassSpringDamperChain,
    ZeroNoise,
    chain_constraints,
)
from .ocp import OcpProblem, OcpSolution, OcpStatus, shift_candidate, solve_ocp
from .prs import PrsSchedule, prs_membership, prs_radius, terminal_ingredients, tighten
from .smpc import ClosedLoopTrace, InitialInfeasibility, SmpcController, run_closed_loop

__all__ = [
    "ContractionCertificate", "NoFeasibleRho", "design_metric", "verify_certificate",
    "Constraints", "DiscreteThreePointNoise", "GaussianNoise", "LinearSystem",
    "MassSpringDamperChain", "ZeroNoise", "chain_constraints",
    "OcpProblem", "OcpSolution", "OcpStatus", "shift_candidate", "solve_ocp",
    "PrsSchedule", "prs_membership", "prs_radius", "terminal_ingredients", "tighten",
    "ClosedLoopTrace", "InitialInfeasibility", "SmpcController", "run_closed_loop",
]
