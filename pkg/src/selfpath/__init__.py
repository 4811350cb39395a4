"""Multi-task self-supervised patch classification for synthetic histology."""
from .errors import (BoundaryError, ConfigError, DataError, DecompositionError, NumericalError, ParameterError,
                     SelfPathError, UndefinedMetricError)

__version__ = "0.1.0"

__all__ = [
    "BoundaryError", "ConfigError", "DataError", "DecompositionError", "NumericalError", "ParameterError",
    "SelfPathError", "UndefinedMetricError", "__version__",
]
