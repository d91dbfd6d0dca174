"""Exception hierarchy shared across the package.

The CLI maps these onto process exit codes: ConfigError -> 2,
DataError / FormatError -> 3, anything else -> 4.
"""


class MmieError(Exception):
    pass


class ShapeError(MmieError):
    """Operand shapes are incompatible for the requested operation."""


class ConfigError(MmieError):
    """Invalid or inconsistent configuration."""


class DataError(MmieError):
    """Invalid dataset contents (manifest lines, labels, spans)."""


class FormatError(MmieError):
    """Malformed binary tensor file or checkpoint."""
