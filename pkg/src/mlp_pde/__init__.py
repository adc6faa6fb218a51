"""Multilevel Picard solver for semilinear parabolic PDEs with gradient-dependent nonlinearities."""

from .cost import CostLedger, CostModelParams, cost_upper_bound, reconcile, theoretical_cost
from .estimator import MultilevelPicardSolver
from .forward import GridMap, bel_value_and_gradient, floor_K, simulate_forward
from .mlp import Estimate, EstimatorFailure, MlpParams, mlp_batch, mlp_estimate, schedule
from .problem import (
    BUILTIN_PROBLEMS,
    PdeProblem,
    lambda_weights,
    make_heat_problem,
    make_manufactured_gradient_problem,
    make_problem,
    project,
)
from .rng import RandomKey, derive_stream, rho, sample_arcsine

__version__ = "0.1.0"

__all__ = [
    "BUILTIN_PROBLEMS", "CostLedger", "CostModelParams", "Estimate", "EstimatorFailure",
    "GridMap", "MlpParams", "MultilevelPicardSolver", "PdeProblem", "RandomKey",
    "bel_value_and_gradient", "cost_upper_bound", "derive_stream", "floor_K",
    "lambda_weights", "make_heat_problem", "make_manufactured_gradient_problem",
    "make_problem", "mlp_batch", "mlp_estimate", "project", "reconcile", "rho",
    "sample_arcsine", "schedule", "simulate_forward", "theoretical_cost",
]
