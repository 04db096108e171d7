"""Exception hierarchy.

Every error raised on purpose by the package derives from :class:`H4VDMError`,
and the CLI maps the four families below onto its exit codes.
"""


class H4VDMError(Exception):
    """Base class for all package errors."""


# -- bitstream -------------------------------------------------------------

class BitstreamError(H4VDMError, ValueError):
    """Raised when an H.264 elementary stream cannot be parsed."""


class NoStartCode(BitstreamError):
    pass


class BitstreamExhausted(BitstreamError):
    pass


class MalformedSps(BitstreamError):
    pass


class MalformedPps(BitstreamError):
    pass


class MalformedSliceHeader(BitstreamError):
    pass


class UnsupportedSliceType(BitstreamError):
    pass


class NoIFrame(BitstreamError):
    pass


# -- records / data ----------------------------------------------------------

class DataError(H4VDMError, ValueError):
    """Raised for invalid or unusable data (records, pairs, labels)."""


class FormatError(DataError):
    pass


class ChecksumMismatch(DataError):
    pass


class ShortGop(DataError):
    pass


class SmallFrame(DataError):
    pass


class DimensionMismatch(DataError):
    pass


class InsufficientPairs(DataError):
    pass


class UnknownDevice(DataError):
    pass


class SingleClass(DataError):
    pass


class DataUnavailable(DataError):
    pass


class NonFiniteLoss(DataError):
    pass


# -- model -------------------------------------------------------------------

class ModelError(H4VDMError, ValueError):
    """Raised when tensors, parameters or checkpoints are inconsistent."""


class ShapeMismatch(ModelError):
    pass


class IndexOutOfRange(ModelError, IndexError):
    pass


class CheckpointError(ModelError):
    pass


# -- configuration -----------------------------------------------------------

class ConfigError(H4VDMError, ValueError):
    pass
