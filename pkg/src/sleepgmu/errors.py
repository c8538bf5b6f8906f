"""Exception hierarchy shared by every sleepgmu module."""


class SleepGMUError(Exception):
    """Base class for all library errors."""


class ShapeError(SleepGMUError, ValueError):
    """Operand shapes are incompatible."""


class ConfigError(SleepGMUError, ValueError):
    """A configuration value is out of range or inconsistent."""


class ValidationError(SleepGMUError, ValueError):
    """Input data failed a content check (labels, one-hot rows, CSV rows)."""


class InputError(SleepGMUError, ValueError):
    """Input is empty or too short for the requested operation."""


class StateError(SleepGMUError, RuntimeError):
    """An object was used in the wrong lifecycle state."""


class NumericalError(SleepGMUError, ArithmeticError):
    """A computation produced a non-finite or ill-conditioned result."""
