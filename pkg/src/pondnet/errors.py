"""Exception types shared across the package."""


class PondnetError(Exception):
    """Base class for all errors raised by pondnet."""


class ConfigError(PondnetError, ValueError):
    """A configuration value violates its invariant.

    ``field`` names the offending field so CLI diagnostics can point at it.
    """

    def __init__(self, field: str, message: str):
        self.field = field
        super().__init__(f"{field}: {message}")


class GeometryError(PondnetError, ValueError):
    """A pose or canvas does not satisfy the placement constraints."""


class ContractError(PondnetError, ValueError):
    """Array shapes or lengths do not match what an operation requires."""


class NumericError(PondnetError, ArithmeticError):
    """Non-finite values appeared where finite ones are required."""


class MetricError(PondnetError, ValueError):
    """A metric is undefined for the given inputs."""


class CalibrationError(PondnetError, RuntimeError):
    """Noise calibration could not reach its target."""
