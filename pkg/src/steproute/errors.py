"""Error taxonomy shared across modules.

The CLI maps these onto distinct exit codes: configuration 2, data 3,
training 4. UsageError means a caller violated a function precondition.
"""


class ConfigError(Exception):
    """Invalid configuration value or malformed config file."""


class UsageError(ValueError):
    """A precondition on a library call was violated."""


class DataError(Exception):
    """Missing, corrupt, or version-incompatible stored artifact."""


class TrainingError(Exception):
    """Training cannot proceed (empty dataset, non-finite loss, ...)."""
