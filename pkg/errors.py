"""
Error taxonomy for voxsynth.

Every failure a caller may need to tell apart has its own class. The
``category`` token is what the command line prints after ``ERROR:``.
"""


class VoxSynthError(Exception):
    category = "internal"


# File formats (NIfTI, RVOL, PGM, checkpoints)

class VolumeFormatError(VoxSynthError):
    category = "format"


class NiftiHeaderError(VolumeFormatError):
    pass


class UnsupportedDatatypeError(VolumeFormatError):
    pass


class CompressedInputError(VolumeFormatError):
    pass


class EndiannessError(VolumeFormatError):
    pass


class BadMagicError(VolumeFormatError):
    pass


class TruncatedPayloadError(VolumeFormatError):
    pass


class VersionMismatchError(VolumeFormatError):
    pass


# Arguments

class ShapeError(VoxSynthError, ValueError):
    category = "shape"


class ValueRangeError(VoxSynthError, ValueError):
    category = "value"


class ConfigError(VoxSynthError):
    category = "config"


class ConfigMismatchError(ConfigError):
    pass


# Computation

class NonFiniteError(VoxSynthError):
    category = "numeric"


class DataError(VoxSynthError):
    category = "data"


class ZeroVarianceError(VoxSynthError):
    category = "stats"
