"""Exception types shared across the package.

Every error raised on purpose derives from RgbtSalError so callers can
catch one base class. The CLI maps each subclass to a distinct exit code.
"""


class RgbtSalError(Exception):
    """Base class for all errors raised by this package."""


class ConfigurationError(RgbtSalError):
    """A config value is missing, malformed, or inconsistent."""


class DataError(RgbtSalError):
    """A dataset directory or image file is unusable."""


class InputError(RgbtSalError):
    """A tensor or array argument violates a documented contract."""


class UsageError(RgbtSalError):
    """Command line arguments do not form a valid invocation."""
