"""Error types raised by the estimation pipeline."""


class HteForestError(Exception):
    """Base class for all package-specific errors."""


class NoVariationError(HteForestError):
    """Node-level regressor has (numerically) zero variance; no model can be fit."""


class DegenerateError(HteForestError):
    """A required denominator or weight matrix is numerically zero."""


class EmptyNeighborhoodError(HteForestError):
    """A query point landed in empty leaves in every tree of the forest."""
