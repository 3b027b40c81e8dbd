"""Exception hierarchy shared across the pipeline.

User errors (bad input, bad config, broken corpus) map to exit code 1;
backend/transport failures map to exit code 2.
"""

from __future__ import annotations


class GateauError(Exception):
    """Base class for all pipeline errors."""


class CorpusError(GateauError):
    """Invalid corpus file, record, or mix specification."""


class ProtocolError(GateauError):
    """Malformed wire message or contract violation."""


class ConfigError(GateauError):
    """Invalid or incomplete run configuration."""


class SelectionError(GateauError):
    """Ranking/selection cannot proceed (empty input, mixed populations, ...)."""


class CacheError(GateauError):
    """Score cache is unreadable or inconsistent."""


class BackendError(GateauError):
    """A scoring backend failed or returned an in-band error."""

    def __init__(self, message: str, *, code: str = "internal", request_id: str | None = None):
        super().__init__(message)
        self.code = code
        self.request_id = request_id
