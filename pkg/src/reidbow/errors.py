"""Exception hierarchy. The CLI maps each class to an exit code."""


class ReidError(Exception):
    exit_code = 1


class ConfigError(ReidError, ValueError):
    exit_code = 2


class DataError(ReidError, ValueError):
    exit_code = 3


class NumericError(ReidError, ArithmeticError):
    exit_code = 4


class LeakageError(DataError):
    """A test identity reached a training step."""
