"""Hex-grid fleet simulator and multi-agent reallocation learners."""

from .hexgrid import GridWorld, build_grid, load_map
from .harness import ExperimentConfig, compare, load_config, run_experiment
from .simcore import FleetEnv, SimConfig, metrics, run_episode

__version__ = "0.1.0"

__all__ = [
    "GridWorld", "build_grid", "load_map", "FleetEnv", "SimConfig", "metrics", "run_episode",
    "ExperimentConfig", "load_config", "run_experiment", "compare",
]
