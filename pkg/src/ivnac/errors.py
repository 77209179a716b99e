"""Exception hierarchy shared by every ivnac module.

The CLI maps these onto exit codes: contract errors exit 1, I/O errors
(plain ``OSError``) exit 2 and numerical failures exit 3.
"""


class IvnacError(Exception):
    """Base class for all package errors."""

    category = "internal"


class ContractError(IvnacError, ValueError):
    """A precondition on arguments or state was violated."""

    category = "contract"


class DimensionError(ContractError):
    """Tensor shapes are incompatible with the requested operation."""


class NumericalError(IvnacError, ArithmeticError):
    """A computation produced a non-finite or otherwise unusable value."""

    category = "numerical"


class NonFiniteError(NumericalError):
    """NaN or Inf appeared in an operation result."""


class InversionError(NumericalError):
    """An invertible 1x1 channel mix is singular or badly conditioned."""

    def __init__(self, message, block=None):
        super().__init__(message)
        self.block = block
