"""Exception hierarchy shared by all modules."""


class FactorCopError(Exception):
    """Base class for errors raised by this package."""


class DataError(FactorCopError):
    """Input data is malformed or violates a model precondition."""


class SchemaError(DataError):
    """A required column is missing from a CSV header."""


class ParseError(DataError):
    """A cell could not be parsed."""


class DomainError(DataError, ValueError):
    """A value lies outside its admissible range."""


class ConvergenceError(FactorCopError):
    """An optimizer failed to converge.

    Attributes
    ----------
    best : object
        Best iterate found before giving up (may be None).
    stage : str
        Name of the failing estimation stage.
    """

    def __init__(self, message, best=None, stage=""):
        super().__init__(message)
        self.best = best
        self.stage = stage


class GodambeError(FactorCopError):
    """The sandwich information matrix could not be inverted."""
