"""Exception hierarchy shared by every stage.

The CLI maps each family to a stable exit code, so raise the most specific
class that applies.
"""


class ClimateCFError(Exception):
    """Base class for all package errors."""

    exit_code = 1


class ConfigError(ClimateCFError):
    exit_code = 3


class DataError(ClimateCFError):
    exit_code = 4


class EstimationError(ClimateCFError):
    exit_code = 5


class StageError(ClimateCFError):
    """Wraps an error raised inside a named pipeline stage."""

    def __init__(self, stage: str, cause: ClimateCFError):
        super().__init__(f"[{stage}] {cause}")
        self.stage = stage
        self.cause = cause
        self.exit_code = cause.exit_code


class EstimationWarning(UserWarning):
    """Non-fatal estimation diagnostics (in-bag rows, degenerate forests, clamping)."""
