"""Exception hierarchy shared by all stages."""


class DataError(ValueError):
    """Input data is malformed or cannot be processed."""


class FormatError(DataError):
    """On-disk file does not follow its declared format."""


class BadMagicError(FormatError):
    pass


class BadMaxvalError(FormatError):
    pass


class TruncatedDataError(FormatError):
    pass


class SizeMismatchError(FormatError):
    pass


class DegenerateError(DataError):
    """Geometric configuration does not determine a unique solution."""


class BehindCameraError(DataError):
    pass


class NoConsensusError(DataError):
    """RANSAC did not find a model with enough support."""


class ConfigError(ValueError):
    """Pipeline configuration is invalid (raised before any stage runs)."""
