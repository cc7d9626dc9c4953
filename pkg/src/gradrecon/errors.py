"""Exception hierarchy shared by every stage.

Each class carries the process exit code the CLI maps it to.
"""


class LabError(Exception):
    exit_code = 1


class ConfigError(LabError):
    exit_code = 2


class ConvergenceError(LabError):
    exit_code = 3


class IncompatibleError(LabError):
    exit_code = 4


class NumericalError(LabError, ArithmeticError):
    exit_code = 5


class ShapeError(LabError, ValueError):
    exit_code = 4


class NonFiniteError(NumericalError):
    """A NaN or Inf showed up in a value or gradient."""
