"""Exception hierarchy shared by all engine modules."""


class MyosegError(Exception):
    """Base class for every error raised by this package."""


class ShapeError(MyosegError):
    """Array shape, extent, or channel-count violation."""


class ParameterError(MyosegError):
    """Numeric argument outside its legal domain."""


class DegenerateBatchError(MyosegError):
    """Batch statistics requested on fewer than two elements per channel."""


class CacheError(MyosegError):
    """Backward pass given a cache that does not match its forward pass."""


class ConfigError(MyosegError):
    """Invalid or inconsistent run/network configuration."""


class DataError(MyosegError):
    """Dataset content problem (missing masks, empty manifest, ...)."""


class FormatError(MyosegError):
    """Base class for file-format violations."""


class BadMagicError(FormatError):
    """File does not start with the expected magic bytes/tag."""


class TruncatedFileError(FormatError):
    """File ends before the declared payload is complete."""


class VersionError(FormatError):
    """File carries an unsupported format version."""
