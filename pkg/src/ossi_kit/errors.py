"""Exception types shared across the toolkit."""


class InvalidParameterError(ValueError):
    """A parameter is outside its valid domain."""


class DimensionMismatchError(ValueError):
    """Array shapes are inconsistent with each other."""


class ConvergenceError(RuntimeError):
    """A steady state or iteration failed to settle within tolerance."""

    def __init__(self, message, residual=None):
        super().__init__(message)
        self.residual = residual


class SolverDivergenceError(RuntimeError):
    """An iterative solver's residual kept increasing."""

    def __init__(self, message, trace=None):
        super().__init__(message)
        self.trace = trace
