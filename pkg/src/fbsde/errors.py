"""Exception hierarchy shared by the solver modules."""


class FbsdeError(Exception):
    pass


class ConfigurationError(FbsdeError, ValueError):
    """Invalid problem, grid or scheme configuration."""


class MissingDerivativeError(FbsdeError):
    pass


class UnsupportedIndexError(FbsdeError, ValueError):
    """Multi-index longer than the implemented set allows."""


class QuadratureBudgetError(FbsdeError):
    pass


class DomainEscapeError(FbsdeError):
    """A point fell outside the grid plus its one-spacing slack."""

    def __init__(self, message, x=None):
        super().__init__(message)
        self.x = x


class PicardError(FbsdeError):
    """Picard iteration did not reach tolerance within the iteration cap."""

    def __init__(self, message, residual=None, iterations=None, level=None):
        super().__init__(message)
        self.residual = residual
        self.iterations = iterations
        self.level = level


class RateUndefinedError(FbsdeError):
    pass
