class HSQError(Exception):
    """Base class for every error raised by this package."""

    exit_code = 1


class FormatError(HSQError):
    """A file on disk does not match its declared format."""


class ValidationError(HSQError):
    """Inputs violate a precondition (bad ids, bad ranges, empty sets...)."""


class NumericalError(HSQError):
    """NaN/Inf, divergence, or a singular system."""

    exit_code = 2
