"""Exception hierarchy shared across the package.

The CLI maps these onto process exit codes: configuration problems exit 2,
data problems exit 3 and numerical failures exit 4.
"""


class CanopySRError(Exception):
    """Base class for all package errors."""

    exit_code = 1


class ConfigError(CanopySRError, ValueError):
    exit_code = 2


class UsageError(CanopySRError, RuntimeError):
    exit_code = 2


class DimensionError(CanopySRError, ValueError):
    exit_code = 2


class RangeError(CanopySRError, ValueError):
    exit_code = 2


class GeometryError(DimensionError):
    pass


class DataError(CanopySRError, ValueError):
    exit_code = 3


class CompositingError(DataError):
    pass


class StatsError(DataError):
    pass


class PairingError(DataError):
    pass


class CorruptFileError(DataError):
    pass


class UndefinedMetricError(DataError):
    pass


class NumericalError(CanopySRError, ArithmeticError):
    exit_code = 4


class IntegrationError(NumericalError):
    def __init__(self, message, t=None):
        super().__init__(message if t is None else f"{message} (t={t:.6g})")
        self.t = t
