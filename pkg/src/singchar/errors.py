"""Exception hierarchy shared by all modules."""


class SingCharError(Exception):
    """Base class for every error raised by the toolkit."""

    exit_code = 3


class NonConvergence(SingCharError):
    """An iterative solver did not reach its tolerance."""


# Both spellings appear in the operation contracts.
NoConvergence = NonConvergence


class SpeedBoundExceeded(SingCharError):
    """Endpoints are farther apart than the configured speed bound allows."""


class HorizonExceeded(SingCharError):
    """Requested time is beyond the measured short-time horizon."""


class NotCauchy(SingCharError):
    """A refinement schedule did not converge in sup-distance."""

    def __init__(self, message, gaps=None):
        super().__init__(message)
        self.gaps = list(gaps or [])


class HypothesisViolated(SingCharError):
    """Input sequences do not satisfy the stability hypotheses."""


class NotWeakKam(SingCharError):
    """The function failed the weak KAM fixed-point residual check."""


class PreconditionFailed(SingCharError):
    """A documented precondition does not hold."""


class InsufficientSamples(SingCharError):
    """No sample point qualified for the requested diagnostic."""


class ConfigError(SingCharError):
    """Scenario configuration failed schema validation."""

    exit_code = 2
