"""
fsidlm: a 2D fictitious-domain fluid-structure interaction solver with a
distributed Lagrange multiplier, Q2-P1 fluid and Q1 solid elements,
semi-implicit backward Euler time stepping and block-preconditioned GMRES.
"""
from .config import SimConfig, parse_config, preset
from .errors import FsiError
from .integrator import Simulation, StepReport, run_simulation

__all__ = ["SimConfig", "parse_config", "preset", "FsiError", "Simulation", "StepReport", "run_simulation"]
__version__ = "0.1.0"
