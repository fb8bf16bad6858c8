"""Exception types shared across the package."""


class HyperBOError(Exception):
    """Base class for all package errors."""


class ValidationError(HyperBOError, ValueError):
    """Malformed input: bad study files, out-of-range values, bad arguments."""


class IngestionError(ValidationError):
    """A study file could not be parsed or violates the study schema."""


class DomainError(ValidationError):
    """A function was evaluated outside its mathematical domain."""


class NumericalError(HyperBOError, ArithmeticError):
    """A linear-algebra or optimization step failed numerically."""
