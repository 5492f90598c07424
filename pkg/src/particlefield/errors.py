"""Exception types raised across the package.

Every error the library raises on bad input or bad state derives from
ParticleFieldError so callers (and the CLI) can catch one base class.
"""


class ParticleFieldError(Exception):
    """Base class for all errors raised by this package."""


class NotFoundError(ParticleFieldError):
    """A required file or directory does not exist."""


class DecodeError(ParticleFieldError):
    """An image or metadata file exists but cannot be parsed."""


class InvalidPoseError(ParticleFieldError):
    """A camera pose matrix is not a rigid transform within tolerance."""


class OutOfBoundsError(ParticleFieldError):
    """A pixel or grid coordinate lies outside its valid range."""


class WriteError(ParticleFieldError):
    """An output path cannot be created or written."""


class InvalidRadiusError(ParticleFieldError):
    """A search radius is zero, negative, or non-finite."""


class InvalidInputError(ParticleFieldError):
    """An input array contains NaN/inf or has an impossible value."""


class IndexTooCoarseError(ParticleFieldError):
    """A query asks a spatial index for pairs beyond its cell reach."""


class InvalidShapeError(ParticleFieldError):
    """Array arguments disagree in shape with each other or the model."""


class InvalidTransformError(ParticleFieldError):
    """A 4x4 matrix is not a rigid (rotation + translation) transform."""


class InvalidDirectionError(ParticleFieldError):
    """A direction vector is not unit length within tolerance."""


class InvalidCacheError(ParticleFieldError):
    """A backward pass received a cache that no longer matches its params."""


class InvalidRayError(ParticleFieldError):
    """A ray has a zero or non-finite direction."""


class InvalidDensityError(ParticleFieldError):
    """A density passed to the compositor is negative or non-finite."""


class InvalidGradientError(ParticleFieldError):
    """A gradient array contains NaN or inf."""


class IncompatibleCheckpointError(ParticleFieldError):
    """A checkpoint has the wrong magic or an unsupported version."""


class CorruptCheckpointError(ParticleFieldError):
    """A checkpoint is truncated or internally inconsistent."""
