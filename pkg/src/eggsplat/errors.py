"""Exception taxonomy shared across the package.

User-facing errors (bad inputs, bad files) derive from ``UserInputError``;
conditions that indicate a bug in this package derive from ``InternalError``.
The CLI maps the former to exit code 1 and the latter to exit code 2.
"""


class EggsplatError(Exception):
    """Base class for all package errors."""


class UserInputError(EggsplatError):
    """Invalid input supplied by the caller (flags, files, shapes)."""


class InternalError(EggsplatError):
    """Invariant violation inside the package; always a bug signal."""


class InvalidParticleError(UserInputError):
    """A particle carries non-finite or otherwise unusable parameters."""


class InvalidBandwidthError(UserInputError):
    """2D particle bandwidth below the configured floor."""


class DimensionMismatchError(UserInputError):
    """Two rasters that must agree in shape do not."""


class EmptyInputError(UserInputError):
    """An operation received a zero-sized image or empty collection."""


class BehindCameraError(UserInputError):
    """Point projects at or behind the near clipping plane.

    Raised by the single-point projection helpers; the rasterizer culls
    such particles instead of aborting.
    """


class ConfigurationError(UserInputError):
    """Inconsistent configuration (e.g. edge-weighted loss without a map)."""


class ImageFormatError(UserInputError):
    """Base class for image decoding failures."""


class MalformedHeaderError(ImageFormatError):
    """Image header could not be parsed."""


class TruncatedPayloadError(ImageFormatError):
    """Image payload shorter than the header promises."""


class UnsupportedBitDepthError(ImageFormatError):
    """Image sample depth other than 8 bit."""


class ManifestError(UserInputError):
    """Base class for scene-manifest loading failures."""


class MissingFileError(ManifestError):
    """A file referenced by the manifest does not exist."""


class BadMatrixShapeError(ManifestError):
    """world_to_camera entry is not 12 numbers (row-major R|t)."""


class NonRigidRotationError(ManifestError):
    """Rotation block of world_to_camera is not orthonormal."""


class CheckpointError(UserInputError):
    """Base class for checkpoint load failures."""


class VersionMismatchError(CheckpointError):
    """Checkpoint format version not recognized."""


class ChecksumError(CheckpointError):
    """Checkpoint payload does not match its recorded checksum."""


class PlyError(UserInputError):
    """Base class for PLY parsing failures."""


class MalformedPlyHeaderError(PlyError):
    """PLY header missing, truncated, or inconsistent."""


class MissingPropertyError(PlyError):
    """PLY vertex element lacks x/y/z coordinates."""
