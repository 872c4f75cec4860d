"""Exception hierarchy shared by all modules."""


class DMMError(Exception):
    """Base class for package errors."""


class ParseError(DMMError, ValueError):
    """A file or value could not be parsed."""


class DimensionError(DMMError, ValueError):
    """Array shapes are inconsistent."""


class SchemaError(DMMError, ValueError):
    """A serialized object does not match the expected layout."""


class InvalidConfig(DMMError, ValueError):
    """Hyperparameters or run options are out of range."""


class ArityError(DMMError, ValueError):
    """Input width does not match what a model expects."""


class ProtocolError(DMMError):
    """A subprocess model replied with something malformed."""


class NumericalError(DMMError, ArithmeticError):
    """A computation produced no usable finite result."""


class LinearAlgebraError(NumericalError):
    """A matrix that must be positive definite is not."""


class ConvergenceError(NumericalError):
    """An optimizer diverged."""
