"""Exception types raised across the package."""


class AttnGuideError(Exception):
    """Base class for all package errors."""


class ValidationError(AttnGuideError, ValueError):
    """An argument violates a documented precondition."""


class ShapeError(ValidationError):
    """Array dimensions are inconsistent."""


class ZeroMassError(AttnGuideError, ArithmeticError):
    """A weighted centroid was requested for cells whose values sum to 0."""


class ZeroVectorError(AttnGuideError, ArithmeticError):
    """Cosine similarity is undefined because one vector is all zeros."""


class UndefinedMetricError(AttnGuideError, ArithmeticError):
    """A statistic is undefined for the given input (e.g. zero variance)."""


class MapFileError(AttnGuideError, ValueError):
    """Malformed attention-map file. ``lineno`` is 1-based, or None."""

    def __init__(self, message, lineno=None):
        self.lineno = lineno
        if lineno is not None:
            message = f"line {lineno}: {message}"
        super().__init__(message)


class ConfigError(ValidationError):
    """Invalid experiment configuration document."""


class SimulationError(AttnGuideError, FloatingPointError):
    """A simulation step produced non-finite values.

    The offending step record is attached as ``record``.
    """

    def __init__(self, message, record=None):
        self.record = record
        super().__init__(message)
