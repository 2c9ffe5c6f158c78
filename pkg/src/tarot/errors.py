"""Exception hierarchy shared by all pipeline stages.

Exit codes: 2 for configuration problems, 3 for data problems, 4 for
numerical failures.  The CLI maps exceptions to exit codes via
``exit_code``.
"""

from __future__ import annotations


class TarotError(Exception):
    """Base class for all engine errors."""

    exit_code = 1


class ConfigError(TarotError):
    """Invalid configuration, flags, or parameter combinations."""

    exit_code = 2


class DataError(TarotError):
    """Invalid or inconsistent input data."""

    exit_code = 3


class NumericalError(TarotError):
    """Numerical failure (decomposition breakdown, NaN, infeasibility)."""

    exit_code = 4


class FormatError(DataError):
    """Malformed binary or sidecar file; carries byte-offset context."""

    def __init__(self, path, offset: int, detail: str):
        self.path = str(path)
        self.offset = offset
        self.detail = detail
        super().__init__(f"{self.path}: offset {offset}: {detail}")


class BadMagicError(FormatError):
    pass


class BadHeaderError(FormatError):
    pass


class TruncatedPayloadError(FormatError):
    pass


class NonFiniteFileError(FormatError):
    """A stored value is NaN or infinite; offset points at the first one."""


class ShapeMismatchError(DataError):
    """Shapes or ID lists disagree between files or matrices."""


class NonFiniteError(DataError):
    """An in-memory matrix contains NaN or infinite entries."""
