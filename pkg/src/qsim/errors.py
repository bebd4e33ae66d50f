"""Exception hierarchy shared by all modules."""


class QsimError(Exception):
    pass


class ParameterError(QsimError, ValueError):
    """Input outside the valid domain of an operation."""


class FormatError(ParameterError):
    """Malformed time-tag or histogram file."""

    def __init__(self, message: str, offset: int):
        super().__init__(f"{message} (byte offset {offset})")
        self.offset = offset


class NumericalError(QsimError, ArithmeticError):
    pass


class RankDeficiencyError(NumericalError):
    """Normal equations of a least-squares problem are singular."""


class SamplingError(ParameterError):
    """Evaluation grid too coarse for the requested features."""
