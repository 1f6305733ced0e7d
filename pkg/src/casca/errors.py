"""Exception hierarchy shared by all CASCA components."""

from __future__ import annotations


class CascaError(Exception):
    """Base class for all errors raised by this package."""


class ValidationError(CascaError):
    """Input violates an invariant (HTTP 400)."""


class UnknownEntityError(CascaError):
    """Named entity (SLO, setting, country, ...) is not configured (HTTP 404)."""


class OutOfRangeError(CascaError):
    """Timestamp precedes all known records (HTTP 416)."""


class QueryParseError(ValidationError):
    """Query text is not in the grammar; carries the offending position."""

    def __init__(self, message: str, position: int):
        super().__init__(f"{message} (at position {position})")
        self.position = position


class ConfigError(ValidationError):
    """Configuration file violates its schema; names the field."""

    def __init__(self, field: str, reason: str):
        super().__init__(f"{field}: {reason}")
        self.field = field
        self.reason = reason


class BusConnectionError(CascaError):
    """Broker endpoint not reachable or connection lost."""


class ControllerUnreachableError(CascaError):
    """Managed service's control endpoint not reachable (HTTP 502)."""


class InterpretationError(CascaError):
    """Hook could not map an envelope payload onto the storage schema."""


class StateUnavailableError(CascaError):
    """An SLO needed for the MDP state has no value yet; the step is skipped."""
