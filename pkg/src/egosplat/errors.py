"""Exception types shared across the package."""


class EgoSplatError(Exception):
    """Base class for all package errors."""


class DomainError(EgoSplatError, ValueError):
    """A query fell outside the valid domain (e.g. trajectory time range)."""


class ContractViolation(EgoSplatError, ValueError):
    """An input broke a documented precondition."""


class ConfigurationError(EgoSplatError, ValueError):
    """Inconsistent or unsupported configuration."""


class NumericalError(EgoSplatError, FloatingPointError):
    """Non-finite values where finite ones are required."""

    def __init__(self, message: str, index: int | None = None):
        super().__init__(message)
        self.index = index


class DatasetError(EgoSplatError, OSError):
    """Missing or malformed dataset files."""
