"""Exception hierarchy shared by every rsavq module."""


class RsavqError(Exception):
    """Base class for all errors raised by this package."""


class FormatError(RsavqError):
    """A file does not follow the expected binary layout."""


class UnsupportedVersionError(FormatError):
    """A file declares a format version this reader does not understand."""


class ValidationError(RsavqError, ValueError):
    """An input violates a documented invariant or precondition."""


class NumericError(RsavqError, ArithmeticError):
    """A numerical routine failed, e.g. a factor was not positive definite."""


class InfeasibleError(RsavqError):
    """No allocation satisfies the requested budget and bit choices."""


class InvariantError(RsavqError, AssertionError):
    """An internal consistency check failed. This indicates a bug."""
