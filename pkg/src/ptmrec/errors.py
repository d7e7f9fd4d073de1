"""Exception types shared across the package.

The CLI maps these onto exit codes: ConfigError -> 2, DataError -> 3,
NumericalAbort -> 4.
"""


class ConfigError(ValueError):
    """Invalid or inconsistent configuration."""


class DataError(ValueError):
    """Malformed or infeasible input data."""


class CheckpointError(RuntimeError):
    """Corrupt or incompatible checkpoint container."""


class NumericalAbort(RuntimeError):
    """Training hit a non-finite loss; carries the last usable checkpoint."""

    def __init__(self, message: str, last_checkpoint: str | None = None):
        super().__init__(message)
        self.last_checkpoint = last_checkpoint
