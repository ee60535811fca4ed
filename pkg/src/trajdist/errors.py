"""Shared exception types."""


class ValidationError(ValueError):
    """Input violates a precondition (shape, finiteness, range)."""


class ConvergenceError(RuntimeError):
    """Iterative solver failed to converge within its iteration cap."""

    def __init__(self, message: str, residual: float):
        super().__init__(f"{message} (residual={residual:.3e})")
        self.residual = residual


class DegenerateInputError(ValueError):
    """Input is structurally valid but carries no usable signal (e.g. all-zero)."""


class NotReadyError(RuntimeError):
    """Operation requested before its preconditions are met; caller should defer."""
