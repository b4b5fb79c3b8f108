"""Exception hierarchy for remseq."""


class RemError(Exception):
    """Base class for all remseq errors."""


class ConfigError(RemError, ValueError):
    """Invalid or inconsistent configuration."""


class GeometryError(RemError, ValueError):
    """Point or radius outside what the spherical frame can represent."""


class DataError(RemError, ValueError):
    """Malformed, empty or inconsistent measurement data."""


class NumericalError(RemError, ArithmeticError):
    """Divergence, singular systems and failed fits."""


class ModelFormatError(RemError):
    """Corrupt, truncated or incompatible checkpoint / grid files."""
