"""Empirical Bayes estimation of spatial fields with compactly supported
Gaussian-process priors, centralized or over a simulated sensor network."""

from .distnet import Network, NetworkTrace, build_tree, per_iteration_messages
from .dynamics import ConstantMean, Hyperparameters, NaturalSpline, Poisson1D, SpatialDynamics
from .errors import (ConvergenceError, DisconnectedGraphError, InvalidInputError,
                     ModelMisspecificationError, ScenarioValidationError, SolverError, ToleranceError)
from .estimator import (MLResult, Posterior, SolverConfig, TrainSystem, dense_posterior_oracle,
                        fit_ml, fit_ml_multistart, map_posterior, ml_cost, ml_gradient)
from .kernel import CompactKernel, cov_cross, cov_train, kernel_eval, spd_check
from .model import (InteractionGraph, ObservationSet, RegressionGrid, SensorRecord,
                    build_interaction_graph, sufficient_stats, validate_scenario)
from .scenario import ScenarioConfig, monte_carlo, run_pipeline

__version__ = "0.1.0"

__all__ = [
    "CompactKernel", "ConstantMean", "ConvergenceError", "DisconnectedGraphError", "Hyperparameters",
    "InteractionGraph", "InvalidInputError", "MLResult", "ModelMisspecificationError", "NaturalSpline",
    "Network", "NetworkTrace", "ObservationSet", "Poisson1D", "Posterior", "RegressionGrid",
    "ScenarioConfig", "ScenarioValidationError", "SensorRecord", "SolverConfig", "SolverError",
    "SpatialDynamics", "ToleranceError", "TrainSystem", "build_interaction_graph", "build_tree",
    "cov_cross", "cov_train", "dense_posterior_oracle", "fit_ml", "fit_ml_multistart", "kernel_eval",
    "map_posterior", "ml_cost", "ml_gradient", "monte_carlo", "per_iteration_messages", "run_pipeline",
    "spd_check", "sufficient_stats", "validate_scenario",
]
