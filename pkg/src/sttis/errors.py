"""Exception hierarchy; the CLI maps each class to an exit code."""


class SttisError(Exception):
    exit_code = 1


class ConfigError(SttisError, ValueError):
    exit_code = 2


class DataError(SttisError, ValueError):
    """Input data is malformed or cannot satisfy an operation."""

    exit_code = 3


class PreconditionError(SttisError, ValueError):
    """A model or pipeline precondition does not hold (e.g. missing history)."""

    exit_code = 4
