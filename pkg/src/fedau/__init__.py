"""Federated averaging with online estimation of unknown participation probabilities."""

from __future__ import annotations

from .config import ExperimentConfig, build_objective, build_population, from_dict, load
from .engine import Trace, run_experiment, simulate_weights
from .errors import ConfigError, DivergenceError, OracleError
from .participation import ClientPopulation, generate_population, manual_population
from .weighting import WeightEstimator, theoretical_K_schedule

__version__ = "0.1.0"

__all__ = [
    "ClientPopulation",
    "ConfigError",
    "DivergenceError",
    "ExperimentConfig",
    "OracleError",
    "Trace",
    "WeightEstimator",
    "build_objective",
    "build_population",
    "from_dict",
    "generate_population",
    "load",
    "manual_population",
    "run_experiment",
    "simulate_weights",
    "theoretical_K_schedule",
]
