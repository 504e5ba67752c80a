"""Numerical solvers and property checks for parabolic problems driven by a
sup-envelope of finitely many semilinear generators.

Submodules: ``model`` (problem data and the operator F), ``sde`` (forward
paths), ``bsde`` (least-squares backward solver), ``dpp`` (lattice dynamic
programming), ``fd`` (finite-difference oracle), ``experiment``/``cli``
(configs, reports and convergence tables).
"""

from .errors import CFLError, ConfigError, InputError, NlfkError, NumericError, SimulationError, SolverError
from .model import DriverSpec, OperatorSpec, TerminalSpec, control, eval_F, eval_generator, validate_assumptions

__version__ = "0.1.0"

__all__ = [
    "CFLError",
    "ConfigError",
    "DriverSpec",
    "InputError",
    "NlfkError",
    "NumericError",
    "OperatorSpec",
    "SimulationError",
    "SolverError",
    "TerminalSpec",
    "control",
    "eval_F",
    "eval_generator",
    "validate_assumptions",
]
