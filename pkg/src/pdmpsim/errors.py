"""Exception types shared by all modules."""


class PdmpError(Exception):
    """Base class for every error raised by the package."""


class NoExactFlow(PdmpError):
    """The model has no closed-form flow; use an integrator instead."""


class ThinningBoundViolated(PdmpError):
    """A thinning candidate had a rate above the supplied bound."""


class NoSimulationPath(PdmpError):
    """Neither an inversion nor a thinning bound is available."""


class ZeroTotalRate(PdmpError):
    """A kernel index was requested while all weights are zero."""


class EventStorm(PdmpError):
    """More events than the configured cap; the rates are likely explosive."""


class NoVectorField(PdmpError):
    """The integrator needs a vector field the model does not provide."""


class ZeroGradient(PdmpError):
    """Reflection is undefined at a critical point of the potential."""


class InvalidConfig(PdmpError):
    """The requested combination of scheme and coupling is not defined."""


class GridTooCoarse(PdmpError):
    """The PDE oracle did not reach the requested self-convergence."""


class InsufficientSignal(PdmpError):
    """Errors are too noisy or too few to fit a convergence order."""


class ConfigError(PdmpError):
    """Invalid experiment configuration file."""
