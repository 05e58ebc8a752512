"""Exception types shared across the package.

Non-fatal conditions (a rejected belief update, a clamped merge) are reported
through return flags and counters rather than exceptions, so streaming code
never pays for exception handling on its hot path.
"""


class ProbitnetError(Exception):
    """Base class for all errors raised by this package."""


class ImproperGaussian(ProbitnetError):
    """A (mean, variance) pair does not describe a proper distribution."""


class UnknownFeature(ProbitnetError):
    """A feature id was looked up strictly but never initialized."""


class FieldOutOfRange(ProbitnetError):
    """An instance carries a field id outside the configured 1..F range."""


class ShapeMismatch(ProbitnetError):
    """Layer input/weight dimensions do not chain."""


class StaleTape(ProbitnetError):
    """Backward was called without a usable forward recording."""


class ParseError(ProbitnetError):
    """A data line could not be parsed into an instance."""

    def __init__(self, message: str, line_number: int = 0):
        super().__init__(f"line {line_number}: {message}" if line_number else message)
        self.line_number = line_number


class InvalidConfig(ProbitnetError):
    """A model or run configuration is internally inconsistent."""


class BadRate(ProbitnetError):
    """A sampling rate is outside (0, 1]."""


class CorruptCheckpoint(ProbitnetError):
    """A checkpoint file failed magic/version/length/checksum validation."""


class StepTooLarge(ProbitnetError):
    """A finite-difference step would push a variance out of its domain."""
