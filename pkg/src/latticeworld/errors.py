"""Exception types shared across the package.

The CLI maps these onto exit codes: ``DataError`` -> 3, ``NumericalAbort`` -> 4.
"""


class DataError(ValueError):
    """Malformed or inconsistent input data."""


class NumericalAbort(RuntimeError):
    """A numerical procedure produced non-finite values or diverged."""

    def __init__(self, message, result=None):
        super().__init__(message)
        self.result = result


class EmptyStructureError(DataError):
    """The geometry stage decoded to an empty active set."""
