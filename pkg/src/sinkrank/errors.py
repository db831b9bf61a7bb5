"""Exception types for numerical failure modes.

Argument validation raises plain ValueError; the classes below mark
failures of the numerics themselves so callers (notably the CLI) can
distinguish usage errors from numerical breakdown.
"""


class NumericalError(RuntimeError):
    """Base class for numerical failures (underflow, singular solves)."""


class KernelUnderflowError(NumericalError):
    """exp(-C/epsilon) lost an entire row or column to underflow.

    Raised by the multiplicative solver; the log-domain solver handles
    these regimes and should be used instead.
    """


class SingularSystemError(NumericalError):
    """A linear system was rank-deficient beyond its structural gauge."""

    def __init__(self, message, condition_number=None):
        if condition_number is not None:
            message = f"{message} (condition number ~{condition_number:.3e})"
        super().__init__(message)
        self.condition_number = condition_number
