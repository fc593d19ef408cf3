"""Dual adaptive tube MPC for reference tracking of uncertain linear systems."""

from dampc.config import ExperimentConfig, parse_config
from dampc.model import UncertainModel, build_mass_spring_model, build_two_state_model, offline_design
from dampc.opt_engine import EngineOptions, solve_successive
from dampc.polytope import Polytope
from dampc.simulate import SimOptions, SimTrace, batch_compare, run_closed_loop

__all__ = [
    "EngineOptions",
    "ExperimentConfig",
    "Polytope",
    "SimOptions",
    "SimTrace",
    "UncertainModel",
    "batch_compare",
    "build_mass_spring_model",
    "build_two_state_model",
    "offline_design",
    "parse_config",
    "run_closed_loop",
    "solve_successive",
]
__version__ = "0.1.0"
