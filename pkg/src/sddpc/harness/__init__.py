"""Experiment configuration, execution, checks and the command-line tool."""

from .config import ConfigError, ExperimentConfig
from .runner import (
    EquivalenceReport,
    McReport,
    RunReport,
    build_controller,
    build_plant,
    collect_offline_data,
    compare_controllers,
    equivalence_check,
    mc_validate_distribution,
    relative_deviation,
    run_experiment,
)

__all__ = [
    "ConfigError",
    "EquivalenceReport",
    "ExperimentConfig",
    "McReport",
    "RunReport",
    "build_controller",
    "build_plant",
    "collect_offline_data",
    "compare_controllers",
    "equivalence_check",
    "mc_validate_distribution",
    "relative_deviation",
    "run_experiment",
]
