"""Graph learning workbench for node classification with OOD nodes."""

from .errors import (
    ConfigError,
    EngineError,
    GraphDataError,
    MetricError,
    OodgatError,
    TrainingAbort,
)

__version__ = "0.1.0"

__all__ = [
    "ConfigError",
    "EngineError",
    "GraphDataError",
    "MetricError",
    "OodgatError",
    "TrainingAbort",
    "__version__",
]
