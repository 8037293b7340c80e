"""Exception types shared across the package."""


class ShapeError(ValueError):
    """Operand shapes are incompatible for the requested operation."""


class NumericError(ArithmeticError):
    """Non-finite values or numerically invalid inputs."""


class ConfigError(ValueError):
    """Invalid or inconsistent run configuration."""


class TokenizerError(ValueError):
    """Out-of-vocabulary word or malformed token sequence."""
