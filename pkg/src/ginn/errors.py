"""Exception types raised across the package."""


class GinnError(Exception):
    """Base class for all package errors."""


class ParseError(GinnError, ValueError):
    pass


class ColumnTypeError(GinnError, TypeError):
    pass


class VocabularyError(GinnError, ValueError):
    pass


class SchemaError(GinnError, ValueError):
    pass


class ConfigurationError(GinnError, ValueError):
    pass


class NumericError(GinnError, ArithmeticError):
    """A computation produced NaN/Inf or diverged."""


class GraphError(GinnError, ValueError):
    """Misuse of the autodiff tape (tensor not recorded, mixed tapes, ...)."""


class CheckpointError(GinnError, ValueError):
    pass


class MetricError(GinnError, ValueError):
    pass
