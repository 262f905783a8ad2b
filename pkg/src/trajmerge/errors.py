"""Exception types shared across the package."""


class TrajmergeError(Exception):
    """Base class for all package errors."""


class ConfigError(TrajmergeError, ValueError):
    """A configuration value is out of range or inconsistent."""


class InputError(TrajmergeError, ValueError):
    """An argument violates an operation's preconditions."""


class FormatError(TrajmergeError, ValueError):
    """A persisted artifact is corrupt or has the wrong layout."""


class SchemaError(FormatError):
    """A dataset record is well formed JSON but violates the record schema."""
