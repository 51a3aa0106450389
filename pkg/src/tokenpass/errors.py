"""Exception hierarchy shared across the package."""


class TokenPassError(Exception):
    """Base class for all package errors."""


class ShapeError(TokenPassError, ValueError):
    pass


class ConfigError(TokenPassError, ValueError):
    pass


class ValidationError(TokenPassError, ValueError):
    pass


class IntegrityError(TokenPassError, ValueError):
    pass


class WeightsError(TokenPassError):
    """Problems reading a weights manifest or payload."""


class ChecksumError(WeightsError):
    pass


class MissingArrayError(WeightsError):
    pass


class ArrayShapeError(WeightsError, ShapeError):
    pass


class ImageFormatError(TokenPassError, ValueError):
    pass
