"""Exception hierarchy. Each class carries the CLI exit code it maps to."""


class RZFError(Exception):
    exit_code = 1


class ConfigError(RZFError, ValueError):
    exit_code = 2


class DimensionError(ConfigError):
    pass


class TableRangeError(ConfigError, LookupError):
    pass


class NumericalError(RZFError, ArithmeticError):
    exit_code = 3


class InvariantError(RZFError):
    exit_code = 4
