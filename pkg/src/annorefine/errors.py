"""Exception types shared across the package.

The split matters for the command line tool: configuration problems map to
exit code 2, data problems to exit code 3.
"""


class AnnoRefineError(Exception):
    """Base class for errors raised by this package."""


class ConfigError(AnnoRefineError, ValueError):
    """Invalid configuration or parameter values."""


class DataError(AnnoRefineError, ValueError):
    """Malformed, inconsistent, or out-of-contract input data."""


class CalibrationMissingError(DataError):
    """A scan references a sensor id with no extrinsic calibration."""


class OutOfRangeError(DataError):
    """A query time falls outside the span of a pose trajectory."""


class AlignmentError(DataError):
    """Timestamps of two inputs that must match could not be aligned."""
