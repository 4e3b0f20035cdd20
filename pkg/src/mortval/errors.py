"""Exception types shared across the package."""


class MortvalError(Exception):
    """Base class for all package errors."""


class DomainError(MortvalError, ValueError):
    """An argument lies outside the mathematical domain of an operation."""


class SolverError(MortvalError, RuntimeError):
    """A finite-difference solve failed to converge.

    Carries enough context (equation label, level, time index, residual)
    to locate the offending step.
    """

    def __init__(self, message, *, label=None, level=None, time_index=None,
                 residual=None):
        super().__init__(message)
        self.label = label
        self.level = level
        self.time_index = time_index
        self.residual = residual


class ControlConstraintError(MortvalError, ValueError):
    """A control field violated its admissibility constraint at a lookup."""


class DegenerateHedgeError(MortvalError, ZeroDivisionError):
    """The hedging bond has zero rate sensitivity; the hedge ratio is undefined."""


class ConfigError(MortvalError, ValueError):
    """A scenario configuration file is invalid; message names the field."""
