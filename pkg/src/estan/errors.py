"""Exception hierarchy shared by every estan module."""


class EstanError(Exception):
    """Base class for all errors raised by this package."""


class DimensionError(EstanError, ValueError):
    """A tensor dimension is zero, negative or too large."""


class ShapeError(EstanError, ValueError):
    """Operand shapes are incompatible with an operation."""


class UnsupportedKernelError(EstanError, ValueError):
    """Kernel geometry that same-padding cannot express (both extents even and > 1)."""


class ValidationError(EstanError, ValueError):
    """Input values violate a precondition (e.g. non-binary mask)."""


class UndefinedMetricError(EstanError, ArithmeticError):
    """A metric has no defined value for the given masks (e.g. empty ground truth)."""


class FormatError(EstanError, ValueError):
    """A file does not follow the expected on-disk format."""

    def __init__(self, message: str, field: str | None = None):
        super().__init__(message)
        self.field = field


class NonFiniteError(EstanError, FloatingPointError):
    """A NaN or Inf appeared in a tensor."""
