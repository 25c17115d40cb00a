"""Exception types shared across the reconstruction pipeline."""


class SfMError(Exception):
    """Base class for every error raised by dfsfm."""


class CheiralityError(SfMError):
    """A point lies behind (or on the principal plane of) a camera."""


class InsufficientDataError(SfMError):
    """Too few correspondences or observations for the requested solver."""


class DegenerateGeometryError(SfMError):
    """Near-zero parallax, rank-deficient normal equations and similar."""


class DegenerateMotionError(DegenerateGeometryError):
    """Two-view motion with too little baseline to fix a translation direction."""


class NoConsensusError(SfMError):
    """RANSAC did not find a hypothesis with enough inliers."""


class InitializationError(SfMError):
    """The incremental mapper could not find a valid initial pair."""


class EmptyInputError(SfMError):
    """An operation received no usable input (no matches, no tracks...)."""


class InputMissingError(SfMError, FileNotFoundError):
    """A required input file or directory does not exist."""
