"""Exception hierarchy shared by every module of the package."""


class MeteocastError(Exception):
    """Base class for all package errors."""


class ConfigurationError(MeteocastError, ValueError):
    """Invalid hyperparameters, options or arguments."""


class ShapeError(MeteocastError, ValueError):
    """Array shapes do not agree with what an operation requires."""


class NumericError(MeteocastError, ArithmeticError):
    """A computation produced or received non-finite values."""


class StateError(MeteocastError, RuntimeError):
    """An object was used before the state it needs was created."""


class FormatError(MeteocastError, ValueError):
    """A file on disk is corrupt, truncated or of the wrong version."""


class TrainingError(NumericError):
    """Optimisation hit a non-finite gradient or loss."""


class NetworkError(MeteocastError, OSError):
    """Transport failure talking to a remote data service; retriable."""


class ParseError(MeteocastError, ValueError):
    """A remote payload could not be decoded.

    ``offset`` is the byte position of the failure when known.
    """

    def __init__(self, message, offset=None):
        super().__init__(message if offset is None else f"{message} (at byte {offset})")
        self.offset = offset
