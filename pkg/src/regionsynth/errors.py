"""Exception types raised across the package."""


class ShapeError(ValueError):
    """Tensor shapes disagree with an operation's contract."""


class ParameterError(ValueError):
    """An argument is outside its admissible range."""


class MaskValidationError(ValueError):
    """A mask is not strictly binary or does not match its image."""


class NumericError(FloatingPointError):
    """A non-finite value appeared where finite values are required."""


class GenerationError(RuntimeError):
    """Random mask generation could not satisfy its constraints."""


class TrainingError(RuntimeError):
    """A training iteration produced a non-finite loss."""


class ConfigurationError(RuntimeError):
    """The runtime setup cannot support the requested computation."""


class CheckpointError(RuntimeError):
    """A checkpoint is missing, corrupt, or from an incompatible version."""


class ManifestError(RuntimeError):
    """A dataset layout or manifest is inconsistent."""


class ConfigError(ValueError):
    """A run configuration file could not be parsed."""
