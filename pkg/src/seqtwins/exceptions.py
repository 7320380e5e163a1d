"""Exception hierarchy shared across the package."""


class SeqTwinsError(Exception):
    """Base class for all package errors."""


class DimensionError(SeqTwinsError, ValueError):
    """Operand shapes are incompatible."""


class ContractError(SeqTwinsError, ValueError):
    """A call violated a documented precondition."""


class NormalizationError(SeqTwinsError, ArithmeticError):
    """A vector with zero norm was normalized without an epsilon floor."""


class DegenerateBatchError(SeqTwinsError, ValueError):
    """Batch too small for a batch-statistics computation."""


class DataError(SeqTwinsError, ValueError):
    """Input data is missing, unreadable or yields nothing usable."""


class ConfigError(SeqTwinsError, ValueError):
    """A run configuration is invalid."""


class DivergenceError(SeqTwinsError, FloatingPointError):
    """Training produced a non-finite loss."""
