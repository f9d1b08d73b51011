class RimError(Exception):
    """Base class for all errors raised by rimap."""


class ConfigError(RimError, ValueError):
    pass


class OutOfBoundsError(RimError, IndexError):
    pass


class StaleCacheError(RimError, RuntimeError):
    """A cached forward/interpolation result no longer matches the model state."""


class ShapeError(RimError, ValueError):
    pass


class DataFormatError(RimError, ValueError):
    """Malformed or corrupted input file."""


class ArchiveError(RimError, OSError):
    pass
