"""Exception hierarchy shared by all solvers.

The CLI maps these onto exit codes: ``InputError``/``ConfigError`` -> 2,
``NumericError`` (and subclasses) -> 3.
"""


class NlfkError(Exception):
    pass


class InputError(NlfkError, ValueError):
    """Shape, dimension or consistency problem in caller-supplied data."""


class ConfigError(InputError):
    """Problem in an experiment config; ``where`` names the line or field."""

    def __init__(self, message, where=None):
        self.where = where
        super().__init__(f"{where}: {message}" if where else message)


class CFLError(ConfigError):
    """Explicit finite-difference step violates the monotonicity bound."""

    def __init__(self, dt, dt_max):
        self.dt = dt
        self.dt_max = dt_max
        super().__init__(
            f"time step {dt:.6g} violates the CFL bound; admissible dt <= {dt_max:.6g}",
            where="scheme",
        )


class NumericError(NlfkError, ArithmeticError):
    """A computed quantity became non-finite."""


class SimulationError(NumericError):
    def __init__(self, path, step, message="non-finite state"):
        self.path = path
        self.step = step
        super().__init__(f"{message} on path {path} at step {step}")


class SolverError(NumericError):
    """A solver could not proceed (e.g. degenerate regression design)."""
