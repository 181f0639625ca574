"""Exception types raised across the package."""


class GCFNError(Exception):
    """Base class for all package errors."""


class ShapeError(GCFNError, ValueError):
    pass


class NumericError(GCFNError, FloatingPointError):
    pass


class UsageError(GCFNError, RuntimeError):
    pass


class ValidationError(GCFNError, ValueError):
    pass


class TrainingError(GCFNError, RuntimeError):
    """Raised when a training loop produces a non-finite loss."""

    def __init__(self, message, epoch=None):
        super().__init__(message)
        self.epoch = epoch


class CoverageError(GCFNError, ValueError):
    """Raised when an empirical CDF cell needed by the quantile oracle is empty."""


class DegenerateNormalizerError(GCFNError, ZeroDivisionError):
    pass
