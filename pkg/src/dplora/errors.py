"""Exception types shared across the package."""


class ContractError(ValueError):
    """A documented precondition or invariant was violated by the caller."""


class DimensionError(ContractError):
    """Operand shapes are incompatible for the requested operation."""


class DataError(ValueError):
    """Malformed input data (bad label code, empty corpus, broken record)."""


class ConfigurationError(ValueError):
    """Invalid run/model configuration (unknown weight id, bad mode combo)."""


class NumericError(ArithmeticError):
    """Non-finite values encountered where finite values are required."""
