"""Exception types shared across the package."""


class SaliencyTuneError(Exception):
    """Base class for all errors raised by this package."""


class InputError(SaliencyTuneError, ValueError):
    """Caller passed data that violates an operation's precondition."""


class ConfigError(SaliencyTuneError, ValueError):
    """A configuration value is outside its declared range or malformed."""


class NumericError(SaliencyTuneError, ArithmeticError):
    """A computation produced non-finite values; the step was aborted."""


class DataLoadError(SaliencyTuneError, RuntimeError):
    """A dataset directory could not be loaded."""
