"""Exception types shared across the package."""


class ShapeError(ValueError):
    """Operand shapes are incompatible with the requested operation."""


class DomainError(ValueError):
    """Input values lie outside the mathematical domain of the operation."""


class TapeError(RuntimeError):
    """Gradient tape misuse: loss not on tape, or backward without a reset."""


class NumericError(ArithmeticError):
    """A forward or backward pass produced NaN/Inf."""


class DegenerateMaskError(ValueError):
    """Requested random mask would mask nothing or everything."""


class FormatError(ValueError):
    """A serialized file is corrupt, truncated, or of the wrong version."""


class ConfigError(ValueError):
    """Run configuration is invalid or contains unknown keys."""
