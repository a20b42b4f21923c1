"""Exception hierarchy shared by every module."""


class AkvqError(Exception):
    """Base class for all library errors."""


class FormatError(AkvqError, ValueError):
    """Malformed AKV1 file or text input."""


class LengthError(AkvqError, ValueError):
    """Payload or byte buffer shorter (or longer) than its header claims."""


class SizeError(AkvqError, ValueError):
    """Declared dimensions overflow addressable size."""


class ParameterError(AkvqError, ValueError):
    pass


class ShapeError(AkvqError, ValueError):
    pass


class NumericError(AkvqError, ValueError):
    """NaN/Inf where finite values are required."""


class StateError(AkvqError, RuntimeError):
    pass


class InputError(AkvqError, ValueError):
    """Input data violates a documented precondition (e.g. attention rows not summing to 1)."""


class UndefinedMetricError(AkvqError, ValueError):
    pass
