"""Exception types shared across the package."""


class NumericError(Exception):
    """Base class for numerical failures."""


class NotPositiveDefinite(NumericError):
    """Matrix could not be factorized even after the jitter retry ladder."""


class DimensionMismatch(NumericError):
    """Operands have incompatible shapes."""


class Singular(NumericError):
    """A required inverse/solve failed because the matrix is singular."""


class NonPositiveStep(NumericError):
    """An Euler step size or kernel rescaling step must be > 0."""


class WindowTooLong(NumericError):
    """A dilated window of R*B steps does not fit into the sequence."""


class MissingCache(NumericError):
    """A cached latent path required for backfitting is absent."""


class UnsupportedOp(NumericError):
    """The autodiff tape does not implement the requested primitive."""


class NonScalarRoot(NumericError):
    """Reverse-mode differentiation requires a scalar root node."""


class DataError(Exception):
    """Base class for dataset ingestion problems."""


class MalformedHeader(DataError):
    """CSV header does not match the expected 't,u*,y*' layout."""


class NonUniformSpacing(DataError):
    """Time column is not an equally spaced, strictly increasing grid."""


class NonFiniteValue(DataError):
    """A NaN or infinity was found in a data file."""
