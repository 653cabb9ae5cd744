class LpslError(Exception):
    """Base class for package errors."""


class ValidationError(LpslError, ValueError):
    """Bad input data, arguments or configuration."""


class NumericalError(LpslError, ArithmeticError):
    """A numerical procedure failed (non-convergence, divergence, NaN)."""


class ConvergenceError(NumericalError):
    pass


class DivergenceError(NumericalError):
    pass


class DensityError(NumericalError):
    """Sparse structure grew past the configured density cap."""
