"""Exception types shared across the pipeline.

Each class carries the CLI exit code it maps to.
"""


class PanoForgeError(Exception):
    exit_code = 2


class ConfigError(PanoForgeError):
    """Bad command-line usage or configuration."""

    exit_code = 1


class DataError(PanoForgeError):
    """Malformed or inconsistent input data."""

    exit_code = 2


class InvariantViolation(DataError, ValueError):
    """A value crossed a module boundary without satisfying its invariants."""


class EstimatorError(PanoForgeError):
    """An estimator backend failed.

    ``retryable`` tells the caller whether repeating the request may help
    (timeouts, connection resets, 5xx) or not (4xx, malformed payloads).
    """

    exit_code = 3

    def __init__(self, message, retryable=False):
        super().__init__(message)
        self.retryable = retryable


class PairEvaluationError(PanoForgeError):
    """Estimator failure annotated with the candidate pair it happened on."""

    def __init__(self, key, cause):
        super().__init__(f"pair {key}: {cause}")
        self.key = key
        self.cause = cause
        self.exit_code = getattr(cause, "exit_code", 2)
