"""Exception types shared across the package."""


class PhraseTTSError(Exception):
    """Base class for all package errors."""


class InputError(PhraseTTSError):
    """Malformed input data or files (CLI exit status 2)."""


class NumericError(PhraseTTSError):
    """A numeric failure such as a diverging loss (CLI exit status 3)."""


class UnsegmentableInput(InputError):
    pass


class UnknownPhoneme(InputError):
    pass


class UnknownPhonemeId(InputError):
    pass


class ShapeMismatch(PhraseTTSError, ValueError):
    pass


class NonFiniteLoss(NumericError):
    pass


class FormatError(InputError):
    """A binary container failed to parse or validate."""
