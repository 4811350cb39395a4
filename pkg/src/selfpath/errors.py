"""Exception types shared across the package.

Each carries an ``exit_code`` so the command line front end can map failures
to process exit statuses without a lookup table.
"""


class SelfPathError(Exception):
    exit_code = 1


class ParameterError(SelfPathError, ValueError):
    """An argument is outside its documented domain."""

    exit_code = 2


class ConfigError(SelfPathError, ValueError):
    """A run configuration is malformed or internally inconsistent."""

    exit_code = 2


class BoundaryError(SelfPathError, ValueError):
    """A sampling window falls (partly) outside the image."""

    exit_code = 3


class DataError(SelfPathError):
    """Missing or unreadable input data."""

    exit_code = 3


class DecompositionError(SelfPathError, ValueError):
    """A stain matrix cannot be inverted."""

    exit_code = 3


class UndefinedMetricError(SelfPathError, ValueError):
    """A metric is undefined for the given labels (e.g. a single class)."""

    exit_code = 3


class NumericalError(SelfPathError, FloatingPointError):
    """A loss became non-finite during training."""

    exit_code = 4
