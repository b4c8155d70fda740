"""Exception types shared across the package."""


class FedSimLabError(Exception):
    """Base class for all package errors."""


class ValidationError(FedSimLabError, ValueError):
    """An input violated a documented precondition or invariant."""


class ConfigError(FedSimLabError, ValueError):
    """An experiment config file failed to parse or validate.

    The message carries a dotted path to the offending field.
    """
