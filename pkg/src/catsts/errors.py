"""Exception hierarchy. CLI exit codes are keyed off these classes."""


class CatsError(Exception):
    exit_code = 1


class ConfigError(CatsError, ValueError):
    exit_code = 2


class ShapeError(CatsError, ValueError):
    exit_code = 2


class UsageError(CatsError, ValueError):
    exit_code = 2


class DataError(CatsError, ValueError):
    exit_code = 3


class NumericError(CatsError, ArithmeticError):
    exit_code = 4
