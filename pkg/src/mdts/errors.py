class MDTSError(Exception):
    """Base class for all errors raised by this package."""


class EncodingError(MDTSError, ValueError):
    pass


class FitError(MDTSError):
    pass


class NumericalError(MDTSError, ArithmeticError):
    pass


class SpaceTooLargeError(MDTSError):
    pass


class TransportError(MDTSError):
    pass


class MalformedResponseError(MDTSError):
    pass


class UnsupportedTaskError(MDTSError):
    pass


class ConfigError(MDTSError, ValueError):
    pass
