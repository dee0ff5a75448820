"""Exception hierarchy shared by every module."""


class L2IError(Exception):
    """Base class for all package errors."""


class IoError(L2IError, OSError):
    pass


class SerializationError(L2IError):
    pass


class FormatError(L2IError):
    pass


class ShapeError(L2IError, ValueError):
    pass


class ConfigError(L2IError, ValueError):
    pass


class EmptyInputError(L2IError, ValueError):
    pass


class DegenerateInputError(L2IError, ValueError):
    pass


class ContractError(L2IError):
    """A call sequence violated an API contract (e.g. a stale tape)."""


class NumericsError(L2IError, FloatingPointError):
    pass


class UndefinedMetricError(L2IError, ValueError):
    pass
