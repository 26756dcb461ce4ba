"""Shared exception types for the pipeline."""

from __future__ import annotations


class SmokegenError(Exception):
    """Base class for pipeline-specific failures."""


class NoForegroundError(SmokegenError, ValueError):
    """An operation that needs foreground pixels got an all-background mask."""


class CapacityError(SmokegenError, ValueError):
    """Not enough records of some category to satisfy a mixing request."""

    def __init__(self, category: str, message: str):
        super().__init__(message)
        self.category = category


class TransportError(SmokegenError, RuntimeError):
    """A model client failed in a retryable way (network, process, timeout)."""


class QuarantineError(SmokegenError):
    """A sample failed a quality check and must be quarantined, never dropped silently."""

    def __init__(self, reason: str):
        super().__init__(reason)
        self.reason = reason


class ScorerOutageError(SmokegenError, RuntimeError):
    """The scoring client failed persistently; partial results are kept on disk."""


class CheckpointError(SmokegenError, RuntimeError):
    """A training checkpoint is unreadable or inconsistent; resume refused."""
