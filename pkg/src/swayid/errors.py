"""Exception types shared across the toolkit, mapped to CLI exit codes."""


class SwayidError(Exception):
    """Base class for all toolkit errors."""

    exit_code = 1


class ConfigError(SwayidError):
    """Invalid configuration value or unsupported option."""

    exit_code = 2


class InputFormatError(SwayidError):
    """A trace, dataset, or model file could not be parsed."""

    exit_code = 3


class DivergenceError(SwayidError):
    """A simulation left the numerically meaningful regime."""

    exit_code = 4


class NotConvergedError(SwayidError):
    """An iterative fit exhausted its budget without converging."""

    exit_code = 5
