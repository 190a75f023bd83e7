"""Exception hierarchy shared by every module.

The CLI maps ``UsageError`` subclasses to exit code 2 and every other
``HiForecastError`` to exit code 1.
"""


class HiForecastError(Exception):
    """Base class for all package errors."""


class UsageError(HiForecastError):
    """Bad configuration, bad arguments or unreadable/corrupt input files."""


class ConfigError(UsageError):
    pass


class ParseError(UsageError):
    def __init__(self, message, path=None, line=None):
        self.path = path
        self.line = line
        where = ""
        if path is not None:
            where = f"{path}"
            if line is not None:
                where += f":{line}"
            where += ": "
        super().__init__(where + message)


class DataError(HiForecastError):
    """Input data violates a precondition of a numerical operation."""


class DomainError(DataError, ValueError):
    """Evaluation point outside the function's domain."""


class InsufficientDataError(DataError):
    pass


class PreconditionError(DataError):
    pass


class NumericalError(HiForecastError):
    pass


class BandwidthError(NumericalError):
    """A kernel window contains no data."""

    def __init__(self, message, where=None):
        self.where = where
        super().__init__(message)


class SmoothingWarning(UserWarning):
    """Local-linear fit fell back to a locally-constant estimate."""
