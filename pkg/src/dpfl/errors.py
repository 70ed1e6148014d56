"""Exception hierarchy shared across the package."""


class DPFLError(Exception):
    """Base class for all package errors."""


class ParameterError(DPFLError, ValueError):
    """An argument violates a documented precondition."""


class FormatError(DPFLError, ValueError):
    """A file does not follow the expected binary or text layout."""


class ShapeError(DPFLError, ValueError):
    """Array dimensions are inconsistent with a model or layout."""


class BudgetViolation(DPFLError):
    """A client would be exposed more often than its privacy budget allows."""

    def __init__(self, message, trace=None):
        super().__init__(message)
        self.trace = trace


class TrainingError(DPFLError):
    """Training diverged or otherwise could not continue.

    ``trace`` holds whatever was recorded before the failure.
    """

    def __init__(self, message, trace=None):
        super().__init__(message)
        self.trace = trace


class AggregationError(DPFLError):
    """Client reports cannot be combined."""


class AuditError(DPFLError):
    """An attack audit lacks the data it needs."""


class ConfigError(DPFLError, ValueError):
    """A configuration file or override is invalid."""
