"""Exception hierarchy shared by every trajforge module."""

from __future__ import annotations


class ForgeError(Exception):
    """Base class for all trajforge errors."""


class InvariantViolation(ForgeError):
    """A value object was asked to do something its invariants forbid."""


class ParseError(ForgeError):
    def __init__(self, message: str, *, turn_index: int | None = None, byte_offset: int | None = None):
        self.turn_index = turn_index
        self.byte_offset = byte_offset
        where = []
        if turn_index is not None:
            where.append(f"turn {turn_index}")
        if byte_offset is not None:
            where.append(f"byte {byte_offset}")
        super().__init__(f"{message} ({', '.join(where)})" if where else message)


# environment engine

class EnvironmentError_(ForgeError):
    """Base for episode-level errors (named to avoid shadowing the builtin)."""


class MissingVignette(EnvironmentError_):
    pass


class MissingImage(EnvironmentError_):
    pass


class UnknownAction(EnvironmentError_):
    pass


class SchemaViolation(EnvironmentError_):
    pass


class DepthExceeded(EnvironmentError_):
    pass


class EpisodeTerminated(EnvironmentError_):
    """step() was called on an episode that already ended."""


class ToolFailure(EnvironmentError_):
    """Raised by executors; the engine turns it into an observation."""


class ProtocolViolation(EnvironmentError_):
    pass


class MarkerMissing(EnvironmentError_):
    pass


# policy gateway

class PolicyError(ForgeError):
    pass


class FixtureMiss(PolicyError):
    pass


class TransportError(PolicyError):
    def __init__(self, message: str, retries: int = 0):
        self.retries = retries
        super().__init__(f"{message} (after {retries} retries)")


class MalformedResponse(PolicyError):
    pass


class RecapInvalid(PolicyError):
    pass


# eval / config

class IncompleteRecord(ForgeError):
    pass


class ConfigError(ForgeError):
    def __init__(self, message: str, key_path: str = ""):
        self.key_path = key_path
        super().__init__(f"{key_path}: {message}" if key_path else message)
