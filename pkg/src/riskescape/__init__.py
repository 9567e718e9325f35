"""Risk-sensitive exit times of cascaded stochastic systems under small noise."""
from importlib import metadata as _metadata

from .dynamics import (BatchResult, DisturbanceLaw, PathStrategy, PiecewiseConstant, SimulationError,
                       simulate_batch, simulate_path, simulate_replicas)
from .game import GameConfig, GameResult, solve_game, staged_game
from .model import CascadeSpec, ScenarioError, load_scenario, validate_scenario
from .optimize import OptimizerConfig
from .risk import (ControlClass, DegenerateEstimateError, Estimate, bvp_oracle_1d,
                   estimate_risk_sensitive, estimate_value_sup)
from .robust import InfeasibleSpecification, UnboundedSpecification, error_budget, value_v0
from .variational import relative_entropy_check, solve_variational_rhs, variational_study

try:
    __version__ = _metadata.version("artifact")
except _metadata.PackageNotFoundError:
    __version__ = "0+unknown"

__all__ = [
    "BatchResult", "CascadeSpec", "ControlClass", "DegenerateEstimateError", "DisturbanceLaw",
    "Estimate", "GameConfig", "GameResult", "InfeasibleSpecification", "OptimizerConfig",
    "PathStrategy", "PiecewiseConstant", "ScenarioError", "SimulationError",
    "UnboundedSpecification", "bvp_oracle_1d", "error_budget", "estimate_risk_sensitive",
    "estimate_value_sup", "load_scenario", "relative_entropy_check", "simulate_batch",
    "simulate_path", "simulate_replicas", "solve_game", "solve_variational_rhs", "staged_game",
    "validate_scenario", "value_v0", "variational_study",
]
