"""Exception hierarchy shared by every module."""


class BalmError(Exception):
    """Base class for all errors raised by the package."""


class ShapeError(BalmError, ValueError):
    """Array or vector dimensions disagree with the model layout."""


class DegenerateInputError(BalmError, ValueError):
    """A numerically degenerate input (e.g. a rank-deficient Stiefel pre-image)."""


class NonFiniteError(BalmError, FloatingPointError):
    """A log density or gradient evaluated to a non-finite value."""


class ConfigError(BalmError, ValueError):
    """Invalid configuration: unknown keys, missing keys, out-of-range values."""


class DataError(BalmError, ValueError):
    """Malformed or inconsistent data."""
