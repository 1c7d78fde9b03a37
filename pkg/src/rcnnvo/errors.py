"""Exception taxonomy mirrored by the CLI exit codes."""


class ConfigError(Exception):
    """Bad usage or configuration (exit code 1)."""


class DataError(Exception):
    """Missing or malformed input data (exit code 2)."""


class NumericError(Exception):
    """Non-finite values encountered during optimization (exit code 3)."""
