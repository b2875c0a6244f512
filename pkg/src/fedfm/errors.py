"""Exception types raised across the package."""


class FedFMError(Exception):
    """Base class for every error raised by this package."""


class DimensionError(FedFMError, ValueError):
    """Array shapes are incompatible."""


class NumericError(FedFMError, ArithmeticError):
    """A non-finite value appeared where a finite one is required."""


class ContractError(FedFMError, ValueError):
    """A documented precondition was violated by the caller."""


class ConfigError(FedFMError, ValueError):
    """A configuration value is invalid or unsatisfiable."""


class ParseError(FedFMError, ValueError):
    """An input file could not be parsed."""

    def __init__(self, message, line=None):
        self.line = line
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)


class ProtocolError(FedFMError, RuntimeError):
    """A federated round was driven in an invalid order or state."""


class InvariantViolation(FedFMError, AssertionError):
    """A runtime monitor detected a broken invariant."""
