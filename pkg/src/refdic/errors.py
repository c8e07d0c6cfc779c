"""Exception hierarchy shared across modules.

The CLI maps ``UsageError`` subclasses to exit code 2 and every other
``RefDicError`` to exit code 1.
"""


class RefDicError(Exception):
    pass


class UsageError(RefDicError):
    """Bad input files or arguments (exit code 2)."""


class SchemaError(UsageError, ValueError):
    pass


class ParseError(SchemaError):
    def __init__(self, message, offset=None):
        super().__init__(message if offset is None else f"{message} (byte offset {offset})")
        self.offset = offset


class EmptyCaptionError(RefDicError, ValueError):
    pass


class MissingItemError(RefDicError, KeyError):
    """A lookup (embedding, graph, image) failed."""

    def __str__(self):
        return str(self.args[0]) if self.args else "missing item"


class InsufficientCandidatesError(RefDicError):
    def __init__(self, message, needed=None, available=None):
        super().__init__(message)
        self.needed = needed
        self.available = available


class DimensionError(RefDicError, ValueError):
    pass


class ParameterError(RefDicError, ValueError):
    pass


class NumericalError(RefDicError, ArithmeticError):
    pass
