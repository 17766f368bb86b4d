"""Exception types shared across the package.

The CLI maps these onto its exit codes: configuration problems exit 1,
data problems exit 2, numerical divergence exits 3.
"""


class ConfigurationError(ValueError):
    """Invalid configuration: bad ranges, indivisible strides, unknown modes."""


class DataError(ValueError):
    """Malformed or inconsistent on-disk data: sidecars, payloads, checkpoints."""


class DivergenceError(ArithmeticError):
    """Training produced a non-finite loss or non-finite parameters."""
