"""Exception hierarchy shared by all chreach modules."""


class ChreachError(Exception):
    """Base class for all errors raised by chreach."""


class ConfigError(ChreachError, ValueError):
    """Invalid parameters, shapes, or scheme/dimension combinations."""


class InvalidDirectionError(ChreachError, ValueError):
    """A direction that should lie on the unit sphere does not."""


class DomainError(ChreachError, ValueError):
    """A point is outside the domain of a map (e.g. off a set boundary)."""


class UnsupportedLiftError(ChreachError, ValueError):
    """The requested set cannot be lifted to a higher dimension."""


class SingularCostateError(ChreachError, ArithmeticError):
    """The costate vanished (or g^T p did): a modelling assumption is violated."""


class DivergenceError(ChreachError, ArithmeticError):
    """Numerical integration produced NaN or Inf values."""

    def __init__(self, message, node=None, direction=None):
        super().__init__(message)
        self.node = node
        self.direction = direction


class InterpolationError(ChreachError, ValueError):
    """A time signal was queried outside its definition window."""


class AssumptionViolationError(ChreachError, ValueError):
    """A structural assumption (e.g. invertibility of g) failed at a probe."""
