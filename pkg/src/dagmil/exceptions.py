"""Exception hierarchy shared by every module."""


class DagError(Exception):
    """Base class for all errors raised by dagmil."""


class DimensionError(DagError, ValueError):
    """Operand shapes do not agree."""


class InputError(DagError, ValueError):
    """An argument violates a documented precondition."""


class ConfigError(DagError, ValueError):
    """A configuration value is invalid or inconsistent."""


class StateError(DagError, RuntimeError):
    """An object is used in a state that does not support the call."""


class NumericalError(DagError, ArithmeticError):
    """A computation produced NaN or Inf."""


class FormatError(DagError, ValueError):
    """A bag file is malformed.

    ``offset`` is the byte position at which parsing failed.
    """

    def __init__(self, message, offset=None):
        self.offset = offset
        if offset is not None:
            message = f"{message} (at byte {offset})"
        super().__init__(message)


class UndefinedMetricError(DagError, ValueError):
    """A metric has no defined value for the given inputs."""
