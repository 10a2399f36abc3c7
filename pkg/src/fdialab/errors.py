"""Exception types raised by the lab's modules."""


class FdialabError(Exception):
    """Base class for all errors raised by this package."""


class CaseParseError(FdialabError):
    """A case file could not be parsed; the message names the offending line."""


class CaseValidationError(FdialabError):
    """Parsed case data violates a structural invariant (slack count, bus refs, reactances)."""


class ObservabilityError(FdialabError):
    """The grid topology does not admit a unique state solution (island without slack,
    rank-deficient normal matrix)."""


class ContractError(FdialabError):
    """An operation was called with inputs that violate its preconditions."""


class NumericError(FdialabError):
    """A non-finite value appeared where the computation requires finite numbers."""


class TrainingError(FdialabError):
    """Model training diverged (non-finite loss)."""


class PoolError(FdialabError):
    """Not enough eligible samples to build the requested attack pool."""


class PlanError(FdialabError):
    """An experiment plan references missing artifacts or has inconsistent settings."""
