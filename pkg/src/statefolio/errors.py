"""Exception hierarchy shared by every module.

The CLI maps :class:`ValidationError` to exit code 1 and
:class:`ComputeError` to exit code 2.
"""


class StatefolioError(Exception):
    """Base class for all package errors."""


class ValidationError(StatefolioError, ValueError):
    """Bad input: malformed file, violated precondition, inconsistent config."""


class ComputeError(StatefolioError, RuntimeError):
    """A computation failed on otherwise valid input (divergence, singularity)."""


class TrainingDivergence(ComputeError):
    def __init__(self, round_no, loss):
        super().__init__(f"non-finite training loss {loss!r} at round {round_no}")
        self.round_no = round_no
        self.loss = loss


class RankDeficiencyError(ComputeError):
    pass


class WealthWipedWarning(UserWarning):
    """Raised as a warning when a return series hits -100% or worse."""


class EmptyLegWarning(UserWarning):
    """A portfolio leg had no members in at least one month."""
