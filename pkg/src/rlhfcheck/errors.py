"""Exception hierarchy shared by every module."""


class RlhfCheckError(Exception):
    """Base class for all errors raised by the package."""


class InvalidInputError(RlhfCheckError, ValueError):
    """Token ids out of range, zero reference probability, malformed records."""


class BudgetExceededError(RlhfCheckError, ValueError):
    """Requested enumeration is larger than the configured budget."""


class ConfigError(RlhfCheckError, ValueError):
    """An estimator, GRO or experiment configuration violates its preconditions."""


class InvalidBatchError(RlhfCheckError, ValueError):
    """A sample batch cannot have come from the claimed sampling policy."""


class TrainingFailure(RlhfCheckError, RuntimeError):
    """Training diverged or produced non-finite parameters."""


class SolverError(RlhfCheckError, RuntimeError):
    """A linear solve or inner maximisation failed."""
