"""Exception types raised across the package."""


class BMPQError(Exception):
    """Base class for every error raised by this package."""


class ShapeError(BMPQError, ValueError):
    """Operand shapes are incompatible."""


class ContractError(BMPQError):
    """A documented precondition was violated by the caller."""


class DegenerateBatchError(BMPQError, ValueError):
    """Batch statistics are undefined for the given batch."""


class UnsupportedWidthError(BMPQError, ValueError):
    """Requested bit width is not supported by the quantizer."""


class CodeOverflowError(BMPQError, OverflowError):
    """An integer code does not fit in the requested two's-complement width."""


class InfeasibleError(BMPQError):
    """No bit-width assignment satisfies the budget.

    ``min_cost`` is the cheapest achievable cost in bits.
    """

    def __init__(self, message, min_cost):
        super().__init__(message)
        self.min_cost = min_cost


class FormatError(BMPQError, ValueError):
    """A binary file does not follow its declared layout."""

    def __init__(self, message, offset=None):
        if offset is not None:
            message = f"{message} (at byte offset {offset})"
        super().__init__(message)
        self.offset = offset
