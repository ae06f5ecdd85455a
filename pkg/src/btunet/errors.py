"""Exception types shared across the package."""


class ConfigError(ValueError):
    """Invalid architecture or experiment configuration."""


class ShapeError(ValueError):
    """Tensor shape incompatible with the requested operation."""


class DataError(ValueError):
    """Dataset layout, manifest, or image content problem."""


class CheckpointError(RuntimeError):
    """Malformed, truncated, or incompatible checkpoint file."""


class TrainingError(RuntimeError):
    """Non-finite gradients or other unrecoverable optimizer state."""
