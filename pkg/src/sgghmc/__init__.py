"""Stochastic-gradient generalized HMC with an explicit two-chain coupling."""

from .constants import DerivedConstants, bias_bound, check_admissibility, derive_constants
from .coupling import CoupledPair, coupled_iteration, rho_star, twisted_distance
from .integrator import AlgoParams, ChainState, LegRandomness, ghmc_iteration, hamiltonian_leg
from .model import (
    ForceField,
    GradientIndex,
    ParameterError,
    make_double_well_target,
    make_gaussian_target,
    make_minibatch_gaussian_target,
    make_minibatch_target,
)

__all__ = [
    "AlgoParams",
    "ChainState",
    "CoupledPair",
    "DerivedConstants",
    "ForceField",
    "GradientIndex",
    "LegRandomness",
    "ParameterError",
    "bias_bound",
    "check_admissibility",
    "coupled_iteration",
    "derive_constants",
    "ghmc_iteration",
    "hamiltonian_leg",
    "make_double_well_target",
    "make_gaussian_target",
    "make_minibatch_gaussian_target",
    "make_minibatch_target",
    "rho_star",
    "twisted_distance",
]
