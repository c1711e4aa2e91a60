"""Exception hierarchy shared by the library and the command-line driver."""


class GriefError(Exception):
    """Base class for all errors raised by gpgrief."""


class DimensionError(GriefError, ValueError):
    """Array shapes do not agree."""


class NumericalError(GriefError, ArithmeticError):
    """A computation produced a non-finite or otherwise unusable result."""


class NumericalOverflowError(NumericalError):
    """A structured product overflowed; ``row``/``col`` name the first bad entry."""

    def __init__(self, msg, row=None, col=None):
        super().__init__(msg)
        self.row = row
        self.col = col


class NotPositiveDefiniteError(NumericalError):
    """A matrix that must be SPD failed to factorize."""


class ConfigError(GriefError, ValueError):
    """Invalid configuration. ``problems`` lists every violated field."""

    def __init__(self, problems):
        if isinstance(problems, str):
            problems = [problems]
        self.problems = list(problems)
        super().__init__("; ".join(self.problems))
