"""Exception types shared across the package.

The CLI maps these onto process exit codes, so raise the most specific one.
"""


class MTLSCVAEError(Exception):
    """Base class for package errors."""

    exit_code = 1


class DataError(MTLSCVAEError, ValueError):
    """Malformed, inconsistent or out-of-range input data or files."""

    exit_code = 3


class ShapeError(DataError):
    """Mis-sized wiring between layers or arrays."""


class NumericalError(MTLSCVAEError, ArithmeticError):
    """Non-finite values produced during training or inference."""

    exit_code = 4

    def __init__(self, message, *, best_params=None):
        super().__init__(message)
        self.best_params = best_params
