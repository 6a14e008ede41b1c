"""Exception and warning types shared across the package."""


class MulticauseError(Exception):
    """Base class for all errors raised by this package."""


class TableTooLarge(MulticauseError, ValueError):
    pass


class UnknownVariable(MulticauseError, KeyError):
    pass


class ZeroProbabilityEvidence(MulticauseError, ValueError):
    """Conditioning event has probability zero.

    Conditionals given such an event are undefined, which is exactly the
    overlap-failure situation; callers must not hide it.
    """


class InconsistentFactors(MulticauseError, ValueError):
    """Factors passed to :func:`compose_joint` do not multiply to a distribution."""


class NoConfounding(MulticauseError, ValueError):
    pass


class ZeroLikelihoodRow(MulticauseError, ValueError):
    pass


class DagViolation(MulticauseError, ValueError):
    pass


class OverlapViolation(MulticauseError, ValueError):
    """Adjustment requested where some stratum has no mass at the target value."""

    def __init__(self, message, offending=()):
        super().__init__(message)
        self.offending = list(offending)


class ZhatMismatch(MulticauseError, ValueError):
    pass


class InfeasibleMargins(MulticauseError, ValueError):
    pass


class StratumTooSmall(UserWarning):
    pass
