"""Exception types raised across the package."""


class MemorizedBNError(Exception):
    """Base class for every error raised by this package."""


class ArgumentError(MemorizedBNError, ValueError):
    """Invalid argument, shape or axis."""


class DomainError(MemorizedBNError, ValueError):
    """Operation undefined for the given input (empty reduction, empty epoch)."""


class StateError(MemorizedBNError, RuntimeError):
    """Layer or network is not in the state the operation needs."""


class FormatError(MemorizedBNError, ValueError):
    """Malformed IDX, CSV or checkpoint content."""


class ConfigError(MemorizedBNError, ValueError):
    """Invalid or unreadable run configuration."""


class NumericError(MemorizedBNError, ArithmeticError):
    """Non-finite value produced during training or gradient checking."""

    def __init__(self, message: str, iteration: int | None = None):
        super().__init__(message)
        self.iteration = iteration
