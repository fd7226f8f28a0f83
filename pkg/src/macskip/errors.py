"""Exception hierarchy for the macskip engine.

Grouping mirrors the CLI exit codes: UsageError-family problems exit 2,
DataError-family problems (bad files, bad datasets) exit 3, anything else
that escapes is an internal error and exits 4.
"""

from __future__ import annotations


class MacskipError(Exception):
    """Base class for all errors raised by this package."""


class UsageError(MacskipError):
    """Invalid configuration or arguments supplied by the caller."""


class DataError(MacskipError):
    """A file or dataset failed validation."""


class NonNormalInput(MacskipError):
    """Float decomposition got zero, a subnormal, an infinity, or NaN."""


class ZeroControlTerm(MacskipError):
    """Exact threshold division asked for with a zero control term."""


class OutOfBounds(MacskipError):
    """Tensor coordinates outside the shape."""


class ShapeMismatch(MacskipError):
    """Operand shapes do not compose."""


class BadMagic(DataError):
    """File does not start with the expected magic number."""


class VersionUnsupported(DataError):
    """Container version is newer than this reader understands."""


class CrcMismatch(DataError):
    """Stored checksum does not match the file body."""


class ShapeInconsistent(DataError):
    """Container declares shapes that do not match its payload."""


class LengthMismatch(DataError):
    """Dataset payload length disagrees with its header."""


class EmptyBatch(UsageError):
    """Calibration or evaluation was given no samples."""


class EmptySamples(MacskipError):
    """Percentile of an empty multiset."""


class NonFiniteLoss(MacskipError):
    """Training loss became NaN or infinite."""
