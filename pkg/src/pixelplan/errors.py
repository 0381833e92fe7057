"""Exception hierarchy shared across the engine.

Worker-facing errors carry enough context (endpoint, tool or metric id) to
attribute every failure to its source.
"""

from __future__ import annotations


class PixelplanError(Exception):
    """Base class for all engine errors."""


# --- image codec / geometry ------------------------------------------------

class MalformedFile(PixelplanError):
    pass


class UnsupportedFormat(PixelplanError):
    pass


class RectOutOfBounds(PixelplanError):
    pass


# --- metrics ----------------------------------------------------------------

class DimensionMismatch(PixelplanError):
    pass


class TooSmall(PixelplanError):
    pass


class DegenerateInput(PixelplanError):
    pass


class SingularCovariance(PixelplanError):
    pass


# --- worker protocol ----------------------------------------------------------

class WorkerUnreachable(PixelplanError):
    """Transport-level failure: connect/read timeout, refused, DNS.

    Named ``Timeout`` in the protocol contract; carries endpoint + subject.
    """

    def __init__(self, message: str, *, endpoint: str = "", subject: str = ""):
        super().__init__(message)
        self.endpoint = endpoint
        self.subject = subject


class ProtocolError(PixelplanError):
    """Malformed reply, version mismatch, or oversized request."""

    def __init__(self, message: str, *, endpoint: str = "", subject: str = ""):
        super().__init__(message)
        self.endpoint = endpoint
        self.subject = subject


class WorkerError(PixelplanError):
    """Well-formed error reply (or invalid payload such as a NaN score)."""

    def __init__(self, message: str, *, endpoint: str = "", subject: str = "",
                 code: str = "internal"):
        super().__init__(message)
        self.endpoint = endpoint
        self.subject = subject
        self.code = code


# --- toolbox ------------------------------------------------------------------

class NoToolAvailable(PixelplanError):
    pass


class ToolFailed(PixelplanError):
    def __init__(self, message: str, *, tool_id: str = ""):
        super().__init__(message)
        self.tool_id = tool_id


class UnsupportedScale(PixelplanError):
    pass


class RegistryInvalid(PixelplanError):
    pass


# --- perception / planning ------------------------------------------------------

class VlmMalformedReply(PixelplanError):
    pass


class LlmMalformedReply(PixelplanError):
    pass


class CyclicRules(PixelplanError):
    pass


# --- restoration ---------------------------------------------------------------

class AllToolsFailed(PixelplanError):
    """Every tool in a step's fan-out failed.

    ``unreachable`` lists the endpoints whose failures were transport
    level, so callers can tell connectivity trouble from tool trouble.
    """

    def __init__(self, message: str, unreachable=()):
        super().__init__(message)
        self.unreachable = tuple(unreachable)


class PlanExhausted(PixelplanError):
    pass


# --- face pipeline -------------------------------------------------------------

class DetectorUnavailable(PixelplanError):
    pass


# --- profiles ------------------------------------------------------------------

class UnknownPreset(PixelplanError):
    pass


class InvalidField(PixelplanError):
    pass


class ProfileParseError(PixelplanError):
    """Profile-name grammar violation; ``position`` points at the offender."""

    def __init__(self, message: str, position: int):
        super().__init__(f"{message} (at position {position})")
        self.position = position
