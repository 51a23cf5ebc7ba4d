"""Exception hierarchy shared across the package.

The CLI maps these onto exit codes: ValidationError -> 1,
NumericalError -> 2, FormatError and OSError -> 3.
"""


class ValidationError(ValueError):
    """Invalid argument, configuration, or precondition violation."""


class NumericalError(ArithmeticError):
    """A computation produced a non-finite value."""


class FormatError(ValueError):
    """Base class for on-disk format problems."""


class MagicMismatchError(FormatError):
    """A binary file does not start with the expected magic string."""


class TruncatedPayloadError(FormatError):
    """A binary payload is shorter (or longer) than its metadata declares."""
