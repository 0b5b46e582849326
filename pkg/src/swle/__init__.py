"""Sliding-window leader election on a simulated HotStuff-style BFT protocol."""

from swle.config import Config, ConfigError, load, preset
from swle.core import Params
from swle.sim import InvariantViolation, Simulation, SimulationReport, run

__all__ = [
    "Config",
    "ConfigError",
    "InvariantViolation",
    "Params",
    "Simulation",
    "SimulationReport",
    "load",
    "preset",
    "run",
]
__version__ = "0.1.0"
