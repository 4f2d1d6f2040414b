"""Exception types shared across the package."""


class HybridError(Exception):
    """Base class for all package errors."""


class ConfigError(HybridError, ValueError):
    pass


class DimensionError(HybridError, ValueError):
    pass


class LengthError(HybridError, ValueError):
    pass


class DegenerateLossError(HybridError, ValueError):
    pass


class AlignmentError(HybridError, ValueError):
    pass


class GenerationError(HybridError, RuntimeError):
    pass


class FrozenViolation(HybridError, AssertionError):
    """A frozen backbone parameter received a nonzero gradient."""


class CollisionError(HybridError, FileExistsError):
    """An output artifact already exists with different content."""
