"""Exception types raised across the package."""


class DimensionError(ValueError):
    """Tensor shapes are incompatible with an operation."""


class ArgumentError(ValueError):
    """An argument is outside the domain an operation accepts."""


class ConfigError(ArgumentError):
    """A network or layer configuration violates one of its invariants."""


class GraphStateError(RuntimeError):
    """Backward was requested without a usable recorded graph, or gradients are missing."""


class CheckpointFormatError(ValueError):
    """A checkpoint file is truncated, corrupt or of an unknown version."""


class DataLoadError(ValueError):
    """A dataset directory is malformed (for example an image without a mask)."""


class TrainingDivergedError(RuntimeError):
    """The training loss became non-finite."""
