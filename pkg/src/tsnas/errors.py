"""Exception hierarchy shared by every module."""


class TsnasError(Exception):
    """Base class for all package errors."""


class DimensionError(TsnasError, ValueError):
    pass


class ConfigError(TsnasError, ValueError):
    pass


class NumericError(TsnasError, ArithmeticError):
    """A non-finite value surfaced where finite values are required."""


class StateError(TsnasError, RuntimeError):
    pass


class UsageError(TsnasError, RuntimeError):
    pass


class ParseError(TsnasError, ValueError):
    def __init__(self, path: str, message: str):
        self.path = path
        super().__init__(f"{path}: {message}")


class IngestionError(TsnasError, ValueError):
    pass


class UndefinedMetricError(TsnasError, ArithmeticError):
    pass
