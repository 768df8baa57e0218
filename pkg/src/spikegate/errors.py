"""Exception hierarchy shared by every stage of the pipeline."""


class SpikeGateError(Exception):
    """Base class for all package errors."""


class ValidationError(SpikeGateError, ValueError):
    """Input violates a documented precondition (shape, range, geometry)."""


class FormatError(ValidationError):
    """Malformed file contents: bad magic, header, or record layout."""


class NumericError(SpikeGateError, ArithmeticError):
    """Non-finite values appeared during a forward or backward pass."""
