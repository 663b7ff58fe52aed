"""Exception types raised across the package."""


class CbrlError(Exception):
    """Base class for all package errors."""


class DimensionError(CbrlError, ValueError):
    """Matrix or vector shapes do not agree."""


class InputError(CbrlError, ValueError):
    """An argument is outside its valid domain."""


class LyapunovError(CbrlError):
    """The Lyapunov operator is singular for the given matrix."""

    def __init__(self, message, abscissa=None):
        super().__init__(message)
        self.abscissa = abscissa


class CareError(CbrlError):
    """No stabilizing solution of the Riccati equation was found.

    The ``diagnostics`` dict carries whatever was known at the point of
    failure (closed-loop abscissa, residual, imaginary leakage, ...).
    """

    def __init__(self, message, **diagnostics):
        super().__init__(message)
        self.diagnostics = diagnostics


class EstimatorError(CbrlError, ValueError):
    """The gradient estimator is undefined for the given arguments."""


class UpdateRejected(CbrlError):
    """A parameter update was refused because the step was not finite."""


class ConfigError(CbrlError, ValueError):
    """An experiment configuration is invalid."""


class RangeError(CbrlError, ValueError):
    """A requested index lies outside the recorded range."""
