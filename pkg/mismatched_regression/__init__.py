"""
Mismatched Bayesian linear regression: replica-symmetric theory and finite-N simulation.
"""

from mismatched_regression.errors import (
    ConfigError,
    DomainError,
    EvaluationError,
    ModelError,
    NonConvergenceError,
    NumericalError,
    SamplerHealthError,
    UnsupportedPotentialError,
)
from mismatched_regression.potential import Potential, PotentialKind, check_growth
from mismatched_regression.replica import (
    ModelParams,
    OverlapState,
    SolveOptions,
    closed_form_quadratic,
    free_energy,
    free_energy_bar,
    predict_regression,
    solve_fixed_point,
)

__version__ = "1.0.0"

__all__ = [
    "ConfigError",
    "DomainError",
    "EvaluationError",
    "ModelError",
    "ModelParams",
    "NonConvergenceError",
    "NumericalError",
    "OverlapState",
    "Potential",
    "PotentialKind",
    "SamplerHealthError",
    "SolveOptions",
    "UnsupportedPotentialError",
    "check_growth",
    "closed_form_quadratic",
    "free_energy",
    "free_energy_bar",
    "predict_regression",
    "solve_fixed_point",
]
