"""Exception types shared across the package."""


class MetaCIError(Exception):
    """Base class for all package errors."""


class ConfigError(MetaCIError, ValueError):
    """Invalid parameters, scenario files, or precondition violations."""


class NumericalError(MetaCIError, ArithmeticError):
    """A computation produced a non-finite value."""
