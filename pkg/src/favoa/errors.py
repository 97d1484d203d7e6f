"""Exception types shared across the package."""


class FavoaError(Exception):
    """Base class for all package errors."""


class DimensionError(FavoaError, ValueError):
    """Operand shapes do not satisfy an operation's contract."""


class ContractError(FavoaError, ValueError):
    """A precondition on arguments was violated."""


class NumericError(FavoaError, ArithmeticError):
    """Non-finite values were encountered where finite ones are required."""


class ConfigError(FavoaError, ValueError):
    """A model or run configuration is inconsistent."""


class FormatError(FavoaError, ValueError):
    """A binary or text file could not be parsed."""


class UndefinedMetricError(FavoaError, ValueError):
    """A metric is undefined for the given labels (e.g. no positives)."""
