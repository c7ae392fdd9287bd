"""Exception hierarchy shared by every subsystem.

The CLI maps these onto exit codes: configuration problems exit 1, bad input
data exits 2 and numeric failures exit 3.
"""


class SkelscanError(Exception):
    """Base class for all package errors."""


class ConfigError(SkelscanError, ValueError):
    pass


class ShapeError(SkelscanError, ValueError):
    pass


class ContractError(SkelscanError, ValueError):
    """A documented precondition of an operation was violated."""


class DataError(SkelscanError, ValueError):
    pass


class ParseError(DataError):
    def __init__(self, message, lineno=None):
        self.lineno = lineno
        if lineno is not None:
            message = f"line {lineno}: {message}"
        super().__init__(message)


class TopologyError(DataError):
    pass


class NumericError(SkelscanError, ArithmeticError):
    pass


class DivideByZeroError(NumericError, ZeroDivisionError):
    pass
