"""Errors raised by the persistence layer."""

from __future__ import annotations


class StorageError(Exception):
    """Base error for reading or writing toolkit files."""


class FormatError(StorageError):
    """Raised when a file exists but does not follow its declared format."""
