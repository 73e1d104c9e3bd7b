"""Exception types shared across the package."""


class FcsPlanError(Exception):
    """Base class for all package errors."""


class NoPath(FcsPlanError):
    """Origin and destination are not connected in the transport network."""


class InfeasibleArc(FcsPlanError):
    """Some round-trip arc cannot be covered by any candidate node."""


class InvalidParams(FcsPlanError):
    """Parameter record violates a documented precondition."""


class EmptySupport(FcsPlanError):
    """A period has no adoption-rate scenarios."""


class DegenerateSpread(UserWarning):
    """Scenario generation collapsed to a single point (zero spread)."""


class SchemaError(FcsPlanError):
    """An input file does not match the documented schema."""


class NonFiniteValue(FcsPlanError):
    """An input file contains NaN or infinite values."""


class InfeasibleCoverage(FcsPlanError):
    """A coverage set is empty, so no siting plan can serve that arc."""


class UnboundedDuals(FcsPlanError):
    """Moment-price variables hit their bound even after enlarging it."""


class SolverFailure(FcsPlanError):
    """The backend failed to return an optimal solution."""


class Infeasible(FcsPlanError):
    """The backend reported an infeasible model."""


class IterationLimit(FcsPlanError):
    """Decomposition stopped at the iteration cap before converging."""


class DualUnavailable(FcsPlanError):
    """The backend did not return dual values for an LP."""
