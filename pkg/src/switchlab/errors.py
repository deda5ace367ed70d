"""Exception hierarchy shared by all switchlab modules."""


class SwitchLabError(Exception):
    """Base class for every error raised by switchlab."""


class DimensionError(SwitchLabError, ValueError):
    """Vectors or schedules of inconsistent length."""


class DomainError(SwitchLabError, ValueError):
    """An argument lies outside the domain of the operation."""


class CapacityError(SwitchLabError):
    """Input exceeds a configured enumeration or size cap."""


class InstabilityError(SwitchLabError, ValueError):
    """Arrival rates are not strictly admissible (some resource load >= 1)."""


class ContractError(SwitchLabError):
    """A documented precondition of an operation was violated."""


class ReductionError(SwitchLabError):
    """Caratheodory support reduction hit a numerically singular step."""


class OrderingError(SwitchLabError):
    """Events were presented out of time order."""


class ConsistencyError(SwitchLabError):
    """Internal state of a simulator became inconsistent."""


class InvariantViolation(SwitchLabError):
    """A pathwise invariant of the coupled simulation failed.

    ``dump`` carries the offending slot's state for diagnosis.
    """

    def __init__(self, message, dump=None):
        super().__init__(message)
        self.dump = dump or {}


class InsufficientDataError(SwitchLabError):
    """Not enough samples to form an estimate."""


class ConfigError(SwitchLabError, ValueError):
    """Experiment configuration failed validation."""

    def __init__(self, errors):
        self.errors = dict(errors)
        detail = "; ".join(f"{k}: {v}" for k, v in self.errors.items())
        super().__init__(f"invalid config: {detail}")


class LPError(SwitchLabError):
    """Linear program is infeasible, unbounded, or failed to converge."""
