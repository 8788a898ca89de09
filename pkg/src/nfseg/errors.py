"""Exception types shared across the package."""


class NfsegError(Exception):
    """Base class for all package-specific errors."""


class ZeroNormalFlow(NfsegError):
    """A normal-flow vector with zero magnitude was used where the constraint is undefined."""


class DegenerateModel(NfsegError):
    """Affine model decoupling is undefined (scale factor collapsed to zero)."""


class UndefinedGradient(NfsegError):
    """Time-surface gradient is unavailable or below the magnitude floor at the queried pixel."""


class EmptyWindow(NfsegError):
    """An operation requiring at least one observation received an empty window."""


class EmptyRegion(NfsegError):
    """A synthetic object region contains no pixel lattice points."""


class FormatError(NfsegError):
    """A file did not conform to its declared format.

    ``record`` is the 1-based index of the offending record (or line),
    when one can be identified.
    """

    def __init__(self, message, record=None):
        self.record = record
        if record is not None:
            message = f"record {record}: {message}"
        super().__init__(message)


class ConfigError(NfsegError):
    """A configuration file is missing a key, or holds an unknown or invalid one."""

    def __init__(self, message, key=None):
        self.key = key
        if key is not None:
            message = f"config key '{key}': {message}"
        super().__init__(message)


class InsufficientObservations(NfsegError):
    """A fit was requested on fewer observations than the method requires."""


class NonFinite(NfsegError):
    """An objective or Jacobian became non-finite, signalling corrupt input."""


class MissingModel(NfsegError):
    """An active label has no associated motion model."""


class DimensionMismatch(NfsegError):
    """Two masks or grids that must share dimensions do not."""


class InactiveLabel(NfsegError):
    """The requested label has no members in the segmentation result."""


class AlignmentError(NfsegError):
    """Observations and ground-truth records could not be aligned one-to-one."""
