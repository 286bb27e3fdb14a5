"""Exception hierarchy shared by all modules."""


class MergerRetroError(Exception):
    """Base class for errors raised by this package."""


class PanelError(MergerRetroError, ValueError):
    """Invalid panel data, schema, or treatment plan."""


class IdentificationError(MergerRetroError, ValueError):
    """Order or rank condition failure in a moment system."""


class EquilibriumError(MergerRetroError, ValueError):
    """The pass-through denominator ``1 - gamma * alpha1`` is singular or non-positive."""


class WeightSolverError(MergerRetroError, RuntimeError):
    """The simplex weight solver failed to converge or the block is unusable."""


class BootstrapError(MergerRetroError, RuntimeError):
    """Too many bootstrap replicates failed."""
