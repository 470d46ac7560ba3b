class ScdcfError(Exception):
    """Base class for package errors."""


class DimensionError(ScdcfError, ValueError):
    """Array shapes do not line up."""


class ConfigurationError(ScdcfError, ValueError):
    """A parameter choice is invalid (even kernel, off-grid scale shift, ...)."""


class FormatError(ScdcfError, ValueError):
    """A file does not follow its container format."""


class StateError(ScdcfError, RuntimeError):
    """An operation was called in the wrong order (e.g. backward before forward)."""


class PreconditionError(ScdcfError, ValueError):
    """A mathematical precondition of an experiment is not met."""


class UndefinedError(ScdcfError, ArithmeticError):
    """A relative quantity has a zero denominator."""
