"""Exception types shared across the package."""


class InvalidCoalitionError(ValueError):
    """A coalition mask names an agent outside the game."""


class CapacityError(ValueError):
    """A request would enumerate more objects than the configured cap."""


class ConfigError(ValueError):
    """A configuration or input file failed validation."""


class ImpossibleObservationError(ValueError):
    """An observation has zero probability under the current belief."""


class VoltageCollapseError(ArithmeticError):
    """The two-bus voltage equation has no real solution."""


class ContractionError(ValueError):
    """Operator weights violate the contraction condition."""


class NonConvergenceError(RuntimeError):
    """An iterative solver hit its iteration cap before reaching tolerance."""

    def __init__(self, message, residual, iterations):
        super().__init__(f"{message} (residual={residual:.3e} after {iterations} iterations)")
        self.residual = residual
        self.iterations = iterations
