"""Exception hierarchy shared by all funcito modules."""


class FuncitoError(Exception):
    """Base class for every error raised by funcito."""


class GridError(FuncitoError, ValueError):
    """A time is off the grid, or two grids are incompatible."""


class DomainError(FuncitoError, ValueError):
    """An argument lies outside the domain of the operation."""


class ShapeError(FuncitoError, ValueError):
    """Array shapes do not match."""


class NumericalError(FuncitoError, ArithmeticError):
    """A non-finite value was produced."""


class DivergenceError(NumericalError):
    """A trajectory blew up during integration."""

    def __init__(self, message, step=None, trajectory=None):
        super().__init__(message)
        self.step = step
        self.trajectory = trajectory


class ConvergenceError(NumericalError):
    """An iterative method did not reach its tolerance."""

    def __init__(self, message, trace=()):
        super().__init__(message)
        self.trace = list(trace)


class ConfigError(FuncitoError, ValueError):
    """An experiment configuration is invalid."""

    def __init__(self, message, line=None):
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)
        self.line = line
