"""Exception types shared across the package."""


class SkylocError(Exception):
    """Base class for package errors."""


class ShapeError(SkylocError, ValueError):
    """Operand shapes violate an operation's contract."""


class NumericError(SkylocError, ArithmeticError):
    """A computation produced or received non-finite values."""


class DegenerateInputError(SkylocError, ValueError):
    """Input is structurally valid but degenerate (zero norm, rank loss, ...)."""


class CheiralityError(SkylocError, ValueError):
    """A 3D point projects from behind the camera."""


class WeightsIOError(SkylocError, IOError):
    """Weights archive is malformed, truncated or carries unknown content."""


class ConfigError(SkylocError, ValueError):
    """Configuration value out of contract."""
