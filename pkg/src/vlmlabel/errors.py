"""Exception hierarchy shared across the pose and behavior pipelines."""

from __future__ import annotations


class VlmLabelError(Exception):
    """Base class for all package errors."""


class ConfigError(VlmLabelError):
    """Invalid configuration or input file. ``key`` names the offending field."""

    def __init__(self, message: str, key: str | None = None) -> None:
        super().__init__(message)
        self.key = key


class ValidationError(VlmLabelError):
    """A data structure violates one of its invariants. ``key`` names the invariant when set."""

    def __init__(self, message: str, key: str | None = None) -> None:
        super().__init__(message)
        self.key = key


# geometry
class DegenerateDepth(VlmLabelError):
    """Point lies behind or on the principal plane of a camera."""


class InsufficientViews(VlmLabelError):
    """Fewer than two observations were supplied."""


class DegenerateGeometry(VlmLabelError):
    """The triangulation system is rank deficient."""


class NoConsensus(VlmLabelError):
    """No camera subset yields at least two inliers."""


# pose pipeline
class EmptyBBox(VlmLabelError):
    """Bounding box has zero or negative area."""


# clients
class ClientError(VlmLabelError):
    """Base for perception client failures; carries the raw text for audit."""

    def __init__(self, message: str, raw_text: str = "", attempts: int = 0) -> None:
        super().__init__(message)
        self.raw_text = raw_text
        self.attempts = attempts


class ClientSchemaError(ClientError):
    """Response never validated within the retry budget."""


class ClientUnavailable(ClientError):
    """Transport failure talking to the endpoint."""


# behavior
class DegenerateCluster(VlmLabelError):
    """A cluster lost all of its soft-assignment mass."""
