"""Exception hierarchy for the auction-learning services.

Every domain error derives from ``AuctionLearningError`` and from the builtin
it specializes, so callers may catch either one.
"""


class AuctionLearningError(Exception):
    """Base class for all domain errors."""


class InvalidDistributionError(AuctionLearningError, ValueError):
    """A prior, sample set or quantile argument is malformed."""


class DiscretizationRequiredError(InvalidDistributionError):
    """A Curve-kind prior reached an operation that needs point masses."""

    def __init__(self, operation: str = ""):
        where = f" ({operation})" if operation else ""
        super().__init__(f"discretize first{where}: operation requires a Discrete distribution")


class TargetingPowerError(AuctionLearningError, ValueError):
    """A sampling interval is malformed or narrower than the targeting power."""


class QueryUnavailableError(AuctionLearningError, ValueError):
    """Exact targeted queries were requested from an oracle with positive targeting power."""


class RegimeError(AuctionLearningError, ValueError):
    """A learner was invoked outside the targeting-power regime it covers."""


class EnumerationLimitError(AuctionLearningError, ValueError):
    """Exact revenue enumeration would exceed the configured profile cap."""


class FamilyError(AuctionLearningError, ValueError):
    """Unknown distribution family or a prior violating its family's range."""


class GenerationError(AuctionLearningError, RuntimeError):
    """A random generator could not produce a prior passing its family check."""


class ExperimentIOError(AuctionLearningError, OSError):
    """Reading or writing an experiment artifact failed."""

    def __init__(self, path, reason):
        self.path = str(path)
        super().__init__(f"{self.path}: {reason}")
