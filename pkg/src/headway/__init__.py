"""Two-layer longitudinal driving stack: a slow parameter planner over a fast
constrained MPC, with an engine-lag plant model, closed-loop simulation, and
safety/smoothness metrics."""

from .dynamics import PlantParams, VehicleState, plant_step, zoh_matrices
from .mpc import DrivingParams, MpcConfig, SpacingPolicy, mpc_step
from .memory import BUILTIN_GROUPS, lookup
from .planner import LmPlanner, MemoryPlanner, parse_response
from .scenario import Scenario, load_scenario, load_scenario_file
from .simulator import SimConfig, SimTrace, replay_trace, run_scenario
from .metrics import aggregate, compute_pet, compute_rms_a, scenario_report

__version__ = "0.1.0"

__all__ = [
    "PlantParams", "VehicleState", "plant_step", "zoh_matrices",
    "DrivingParams", "MpcConfig", "SpacingPolicy", "mpc_step",
    "BUILTIN_GROUPS", "lookup",
    "LmPlanner", "MemoryPlanner", "parse_response",
    "Scenario", "load_scenario", "load_scenario_file",
    "SimConfig", "SimTrace", "replay_trace", "run_scenario",
    "aggregate", "compute_pet", "compute_rms_a", "scenario_report",
    "__version__",
]
