"""Exception hierarchy shared across the package."""


class ReplayLabError(Exception):
    """Base class for every error raised by replaylab."""


class ShapeError(ReplayLabError, ValueError):
    """Array dimensions or gradient layouts do not line up."""


class NumericError(ReplayLabError, FloatingPointError):
    """A non-finite value reached a parameter update."""


class ConfigError(ReplayLabError, ValueError):
    """An experiment or stream configuration is invalid."""


class IdxFormatError(ReplayLabError, ValueError):
    """Base class for malformed IDX files."""


class IdxMagicError(IdxFormatError):
    pass


class IdxTruncatedError(IdxFormatError):
    pass


class IdxCountMismatchError(IdxFormatError):
    pass
