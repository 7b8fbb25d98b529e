"""Exceptions shared across pipeline stages."""

from __future__ import annotations


class AlignprefError(Exception):
    """Base class for all package errors."""


class EmptyText(AlignprefError):
    """Raised when an operation requires non-empty text."""


class RemoteError(AlignprefError):
    """A remote provider failed after retries were exhausted."""

    def __init__(self, status: int, body: str) -> None:
        super().__init__(f"remote call failed with status {status}: {body[:200]}")
        self.status = status
        self.body = body


class ConfigError(AlignprefError):
    """Invalid or incomplete run configuration."""
