"""Exception hierarchy shared by all modules."""


class HorsespecError(Exception):
    """Base class for every error raised by the package."""


class InvalidArgument(HorsespecError, ValueError):
    pass


class DomainError(HorsespecError, ValueError):
    pass


class ResourceLimit(HorsespecError):
    pass


class ConfigurationError(HorsespecError, ValueError):
    """A parameter set violates one of the construction constraints."""


class NumericalFailure(HorsespecError, RuntimeError):
    """An iterative solver did not converge.

    ``diagnostics`` carries solver state useful for debugging (iteration
    count, last residual, ...).
    """

    def __init__(self, message, **diagnostics):
        super().__init__(message)
        self.diagnostics = diagnostics


class Infeasible(HorsespecError):
    """The requested rotation vector is not attained by any invariant measure."""


class ShrinkRates(HorsespecError):
    """A surgery violated its C^2 budget or Jacobian positivity.

    ``factor`` is the suggested multiplier for ``x_scale``.
    """

    def __init__(self, message, factor=0.1):
        super().__init__(message)
        self.factor = factor


class CoreViolation(HorsespecError):
    """A periodic orbit enters a blend collar, so the affine core model fails."""


class VerificationFailure(HorsespecError):
    pass
