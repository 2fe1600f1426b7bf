"""Exception types raised across the package."""


class ActiveChannelError(Exception):
    """Base class for all package errors."""


class InvalidConfigError(ActiveChannelError, ValueError):
    """A configuration value or argument is outside its legal range."""


class ShapeError(ActiveChannelError, ValueError):
    """Array dimensions do not chain or match."""


class NumericError(ActiveChannelError, ArithmeticError):
    """A computation produced non-finite values or a factorization failed.

    ``context`` carries whatever the raising site knows (offending component,
    step index, condition estimate, ...).
    """

    def __init__(self, message, **context):
        if context:
            detail = ", ".join(f"{k}={v!r}" for k, v in context.items())
            message = f"{message} ({detail})"
        super().__init__(message)
        self.context = context


class IngestionError(ActiveChannelError, ValueError):
    """A dataset or model container on disk is malformed."""

    def __init__(self, message, field=None):
        super().__init__(message if field is None else f"{field}: {message}")
        self.field = field


class ExperimentComplete(ActiveChannelError):
    """No unmeasured points remain."""
