"""Exception types shared across the package.

Validation-style errors (bad files, bad config, bad shapes) map to CLI
exit code 2; runtime training aborts map to exit code 3.
"""


class TangnnError(Exception):
    """Base class for all package errors."""


class ParseError(TangnnError):
    """A data file could not be parsed; carries the offending line number."""

    def __init__(self, path, line_no, message):
        self.path = str(path)
        self.line_no = line_no
        super().__init__(f"{path}:{line_no}: {message}")


class RangeError(TangnnError):
    """An index (e.g. an edge endpoint) is outside the valid id range."""


class ShapeError(TangnnError):
    """Array dimensions are inconsistent with the declared contract."""


class ConfigError(TangnnError):
    """A configuration value is invalid or missing."""


class InputError(TangnnError):
    """A runtime argument violates a function's precondition."""


class StateError(TangnnError):
    """An object was used in an order its lifecycle forbids."""


class NonFiniteError(TangnnError):
    """A NaN or Inf appeared where only finite values are allowed."""


class TrainingAbort(TangnnError):
    """Training stopped early due to a numerical failure.

    Carries the last good parameters and the loss reports collected so
    far, so callers can still persist a usable checkpoint.
    """

    def __init__(self, message, params=None, reports=None):
        self.params = params
        self.reports = reports or []
        super().__init__(message)
