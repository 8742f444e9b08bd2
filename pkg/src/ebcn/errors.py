"""Exception taxonomy shared across the package.

The CLI maps these onto exit codes: ConfigError -> 2, DataError -> 3,
NumericFault -> 4. Everything else is a genuine bug and surfaces as a
traceback.
"""


class ConfigError(ValueError):
    """A configuration value violates its documented invariants."""


class DataError(ValueError):
    """Input data is malformed, inconsistent, or incompatible."""


class NumericFault(ArithmeticError):
    """A computation produced NaN/Inf or was used out of order."""


class ShapeError(DataError):
    """An operation received tensors with incompatible explicit shapes."""
