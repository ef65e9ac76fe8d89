"""Exception hierarchy shared across the package."""


class OodgatError(Exception):
    """Base class for all errors raised by this package."""


class EngineError(OodgatError):
    """Misuse of the autodiff engine: shape mismatch, double backward,
    non-scalar loss, or a nondeterministic forward detected by grad_check."""


class GraphDataError(OodgatError):
    """Malformed graph bundle or inconsistent graph arguments."""


class ConfigError(OodgatError):
    """Invalid experiment spec file or CLI argument combination."""


class MetricError(OodgatError):
    """Degenerate metric input, e.g. a score vector with only one class present."""


class TrainingAbort(OodgatError):
    """Raised when a loss or gradient turns non-finite during training.

    Carries the step index and the last finite loss breakdown so the
    caller can report where the run died.
    """

    def __init__(self, message: str, step: int, breakdown: dict | None = None):
        super().__init__(message)
        self.step = step
        self.breakdown = breakdown or {}
