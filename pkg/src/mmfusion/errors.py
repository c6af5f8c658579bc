"""Shared exception types and process exit codes."""

EXIT_OK = 0
EXIT_CONFIG = 1
EXIT_NUMERIC = 2


class ConfigError(ValueError):
    """A model, shape or run configuration is structurally invalid."""


class InputError(ValueError):
    """Runtime data violates an operation's preconditions."""


class UsageError(RuntimeError):
    """An API was called out of contract, e.g. backward() on a non-scalar."""


class NumericFault(ArithmeticError):
    """A NaN or Inf appeared where finite values are required."""
