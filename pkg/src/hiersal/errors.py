"""Exception types shared across the package."""


class HiersalError(Exception):
    """Base class for all package errors."""


class ShapeError(HiersalError):
    """Tensor extents incompatible with an operation (message names the axis)."""


class ConfigError(HiersalError):
    """Invalid model or run configuration."""


class UnknownDomainError(HiersalError):
    """A domain tag with no stored statistics or parameters."""


class ModeError(HiersalError):
    """Operation not available in the current model mode."""


class DegenerateTargetError(HiersalError):
    """Ground-truth map cannot be normalized (all zeros)."""


class InputError(HiersalError):
    """Invalid runtime input (e.g. video shorter than the clip length)."""


class IngestionError(HiersalError):
    """Dataset file missing or malformed; message names the path."""


class CheckpointError(HiersalError):
    """Checkpoint bytes are corrupt, truncated, or of an unknown version."""


class ModeMismatchError(CheckpointError):
    """Checkpoint was trained in a different adaptation mode than requested."""
