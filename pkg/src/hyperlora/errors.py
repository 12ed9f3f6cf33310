"""Exception types shared across the package."""


class HyperLoraError(Exception):
    """Base class for package-specific failures."""


class ConfigurationError(HyperLoraError, ValueError):
    """Invalid configuration: bad dimensions, unregistered entries, empty inputs."""


class DimensionError(HyperLoraError, ValueError):
    """Tensor shape does not match the declared contract."""


class NumericalError(HyperLoraError, RuntimeError):
    """Non-finite values encountered where finite math was required."""


class IngestionError(HyperLoraError, ValueError):
    """Dataset file missing, malformed, or otherwise unreadable."""


class IntegrityError(HyperLoraError, RuntimeError):
    """Checkpoint blob corrupt, truncated, or from an unsupported format version."""


class StageError(HyperLoraError, ValueError):
    """Checkpoint stage does not permit the requested operation."""
