"""Exception types shared across the package."""


class MemshardError(Exception):
    """Base class for all package errors."""


class InvalidConfigError(MemshardError, ValueError):
    """A configuration violates its invariants. Raised before any work starts."""


class NumericError(MemshardError, ArithmeticError):
    """A non-finite value appeared in a computation.

    ``layer`` is the index of the network layer that produced it, when known.
    """

    def __init__(self, message: str, layer: int | None = None):
        super().__init__(message)
        self.layer = layer
