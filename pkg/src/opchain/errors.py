"""Exception types raised across the package."""


class OpchainError(Exception):
    """Base class for all package errors."""


class DimensionMismatch(OpchainError, ValueError):
    pass


class NonFiniteGradient(OpchainError, FloatingPointError):
    pass


class Divergence(OpchainError):
    """Training produced a non-finite loss.

    The loss history recorded up to (and including) the failing epoch is kept
    on the ``history`` attribute.
    """

    def __init__(self, message, history=None):
        super().__init__(message)
        self.history = list(history or [])


class NonPositiveIntensity(OpchainError, ValueError):
    pass


class InvalidKvp(OpchainError, ValueError):
    pass


class ConfigInvalid(OpchainError, ValueError):
    pass


class NegativeMean(OpchainError, ValueError):
    pass


class DegenerateInput(OpchainError, ValueError):
    pass


class ImageTooSmall(OpchainError, ValueError):
    pass


class UnknownVariant(OpchainError, ValueError):
    pass


class Falsification(OpchainError):
    """An empirical deviation exceeded its theoretical worst-case bound."""

    def __init__(self, message, report=None):
        super().__init__(message)
        self.report = report
