"""Exception types shared across the package."""


class GmmChanError(Exception):
    """Base class for all errors raised by gmmchan."""


class ParameterError(GmmChanError, ValueError):
    """Invalid scalar or vector parameter."""


class ShapeError(GmmChanError, ValueError):
    """Array shapes or dimensions do not agree."""


class DegenerateDataError(GmmChanError, ValueError):
    """Dataset carries no usable energy or too few samples."""


class CapacityError(GmmChanError, ValueError):
    """A requested dense expansion or model size exceeds the configured limit."""


class NumericalError(GmmChanError, ArithmeticError):
    """Factorization failure, optionally tied to a mixture component."""

    def __init__(self, message, component=None):
        if component is not None:
            message = f"{message} (component {component})"
        super().__init__(message)
        self.component = component


class FormatError(GmmChanError, ValueError):
    """Corrupt or incompatible binary file."""


class ConfigError(GmmChanError, ValueError):
    """Invalid experiment configuration; ``field`` holds the dotted key path."""

    def __init__(self, message, field=None):
        super().__init__(f"{field}: {message}" if field else message)
        self.field = field
