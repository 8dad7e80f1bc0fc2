"""Exception types raised across the package."""

from __future__ import annotations


class LaitError(Exception):
    """Base class for all errors raised by :mod:`lait`."""


class ShapeError(LaitError, ValueError):
    pass


class MaskError(LaitError, ValueError):
    """A mask row with no allowed entries, or a malformed segment layout."""


class ConfigError(LaitError, ValueError):
    pass


class CacheError(LaitError):
    pass


class FormatError(LaitError):
    """Structured parse failure for the binary weight and cache-entry formats.

    ``offset`` is the byte position where parsing stopped, ``reason`` a short
    machine-friendly tag (``bad_magic``, ``bad_version``, ``truncated``, ...).
    """

    def __init__(self, reason: str, detail: str = "", offset: int | None = None):
        self.reason = reason
        self.detail = detail
        self.offset = offset
        msg = reason if not detail else f"{reason}: {detail}"
        if offset is not None:
            msg += f" (at byte {offset})"
        super().__init__(msg)


class TrainingDiverged(LaitError):
    pass
