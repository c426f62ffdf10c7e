"""Exception hierarchy shared by every module."""


class MCSepError(Exception):
    """Base class for all package errors."""


class ConfigurationError(MCSepError, ValueError):
    pass


class ShapeError(MCSepError, ValueError):
    pass


class LengthError(ShapeError):
    pass


class GeometryError(MCSepError, ValueError):
    pass


class FormatError(MCSepError, ValueError):
    pass


class DegenerateInputError(MCSepError, ValueError):
    pass


class DomainError(MCSepError, ValueError):
    pass


class ModeError(MCSepError, ValueError):
    pass


class DataError(MCSepError, IOError):
    pass


class TrainingError(MCSepError, RuntimeError):
    """Raised when a training step produces a non-finite value.

    ``culprit`` names the first tensor observed to be non-finite.
    """

    def __init__(self, message, culprit=None):
        super().__init__(message)
        self.culprit = culprit
