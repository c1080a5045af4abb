"""Exception taxonomy shared by every maekit module."""


class MaekitError(Exception):
    """Base class for all errors raised by maekit."""


class DimensionError(MaekitError):
    """Operand shapes are incompatible; the message names both shapes."""


class ConfigError(MaekitError):
    """A configuration value or argument combination is invalid."""


class ContractError(MaekitError):
    """An operation was called outside its documented contract."""


class IndexRangeError(MaekitError):
    """A gather/scatter index falls outside the valid row range."""


class UnsupportedConfigError(MaekitError):
    """A requested operator configuration is outside the supported set."""


class DataError(MaekitError):
    """An input file was rejected as corrupt, truncated, or mis-formatted."""


class CheckpointError(MaekitError):
    """A checkpoint file failed to parse or carries the wrong version."""


class NumericError(MaekitError):
    """Training hit a non-finite loss and aborted."""
