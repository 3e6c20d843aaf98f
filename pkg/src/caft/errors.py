class CaftError(Exception):
    """Base class for all errors raised by this package."""


class FormatError(CaftError):
    """A binary artifact (token map or model file) is malformed or corrupted."""


class DataError(CaftError):
    """Inputs violate a documented precondition or invariant."""
