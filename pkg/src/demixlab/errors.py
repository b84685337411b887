"""Exception types shared across the package."""


class ConfigError(ValueError):
    """Invalid or inconsistent configuration (also raised for unknown config keys)."""


class ShapeError(ValueError):
    """Tensor shape does not match the contract of the operation."""


class DataGenError(ValueError):
    """Invalid synthesis request (pitch out of range, empty source, ...)."""


class LookupError_(KeyError):
    """Requested item absent from a dataset split."""


class MissingArtifactError(FileNotFoundError):
    """A prerequisite artifact (dataset, checkpoint) does not exist."""


class TrainingDivergedError(RuntimeError):
    """Loss became non-finite during training."""
