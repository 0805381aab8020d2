"""Regression Monte Carlo for reflected backward SDEs, obstacle problems and
optimal control with stopping."""

__version__ = "0.1.0"

from .analysis import (SolverConfig, ValueField, ValueFunction, ZetaField, check_covariation,
                       check_lipschitz, check_supersolution, estimate_zeta, evaluate_u,
                       obstacle_monotonicity, value_field)
from .backward import (BackwardSolution, PenaltySchedule, PenaltyTrace, lp_norms,
                       smooth_penalty, solve_bsde, solve_penalized, solve_rbsde, solve_reflected)
from .control import (ControlProblem, StoppingRule, closed_loop, cost_J, girsanov_weight,
                      hamiltonian, optimal_stopping_rule, select_gamma,
                      verify_fundamental_relation)
from .forward import PathEnsemble, SimulationError, simulate, simulate_controlled
from .model import GalerkinModel, ObstacleProblem, TimeGrid, validate_model
from .oracle import binomial_oracle
from .presets import get_preset
from .regression import BasisSpec, RegressionError, fit, fit_predict

__all__ = [
    "BackwardSolution", "BasisSpec", "ControlProblem", "GalerkinModel", "ObstacleProblem",
    "PathEnsemble", "PenaltySchedule", "PenaltyTrace", "RegressionError", "SimulationError",
    "SolverConfig", "StoppingRule", "TimeGrid", "ValueField", "ValueFunction", "ZetaField",
    "binomial_oracle", "check_covariation", "check_lipschitz", "check_supersolution",
    "closed_loop", "cost_J", "estimate_zeta", "evaluate_u", "fit", "fit_predict",
    "get_preset", "girsanov_weight", "hamiltonian", "lp_norms", "obstacle_monotonicity",
    "optimal_stopping_rule", "select_gamma", "simulate", "simulate_controlled",
    "smooth_penalty", "solve_bsde", "solve_penalized", "solve_rbsde", "solve_reflected",
    "validate_model", "value_field", "verify_fundamental_relation",
]
