class OrfError(Exception):
    """Base class for errors raised by this package."""

    exit_code = 1


class ConfigError(OrfError, ValueError):
    exit_code = 2


class DataError(OrfError, ValueError):
    exit_code = 3


class NumericalError(OrfError, ArithmeticError):
    exit_code = 4


class ShapeError(OrfError, ValueError):
    exit_code = 2


class GeometryError(OrfError, ValueError):
    exit_code = 3
