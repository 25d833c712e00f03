"""Exception types raised across the package."""


class TransferError(Exception):
    """Base class for all package errors."""


class ShapeError(TransferError, ValueError):
    pass


class CacheError(TransferError):
    """A forward cache does not belong to the network it is used with."""


class InsufficientSamplesError(TransferError, ValueError):
    pass


class FeasibilityError(TransferError, ValueError):
    """A network violates its weight-norm budget."""


class SizeError(TransferError, ValueError):
    pass


class NumericError(TransferError, FloatingPointError):
    def __init__(self, message, path=None):
        super().__init__(message if path is None else f"{message} (at {path})")
        self.path = path


class ParseError(TransferError, ValueError):
    def __init__(self, message, line=None):
        super().__init__(message if line is None else f"line {line}: {message}")
        self.line = line


class SchemaError(TransferError, ValueError):
    pass
