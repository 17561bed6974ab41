"""Exception types shared across the package."""


class LayerblendError(Exception):
    """Base class for all package-specific errors."""


class DimensionError(LayerblendError, ValueError):
    """Shapes of the operands do not fit the operation."""


class ContractError(LayerblendError, ValueError):
    """An operation was called in a way its contract forbids."""


class InvalidMaskError(LayerblendError, ValueError):
    """A reduction mask excludes every position it must keep."""


class VocabularyError(LayerblendError, ValueError):
    """A token id lies outside the model vocabulary."""


class InputError(LayerblendError, ValueError):
    """User-supplied data is empty or malformed."""


class CheckpointError(LayerblendError, RuntimeError):
    """A checkpoint file cannot be read back as a complete model."""


class ConfigError(LayerblendError, ValueError):
    """An experiment configuration file is invalid."""


class ReportError(LayerblendError, ValueError):
    """A results store lacks the data a report needs."""
