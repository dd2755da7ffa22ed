"""Exception hierarchy shared by every simulator module."""

from __future__ import annotations


class ShadowRangeError(Exception):
    """Base class for all simulator errors.

    ``blocked_by`` names the defense toggle responsible when the failure was
    caused by a countermeasure rather than by the attack itself.
    """

    blocked_by: str | None = None


# netsim
class DuplicateNode(ShadowRangeError):
    pass


class UnknownNode(ShadowRangeError):
    pass


# hostmodel
class NoBootablePartition(ShadowRangeError):
    pass


class InvalidPartitionTable(ShadowRangeError):
    pass


class Unreachable(ShadowRangeError):
    pass


class AuthFail(ShadowRangeError):
    pass


class AuthRequired(ShadowRangeError):
    pass


class MalformedPayload(ShadowRangeError):
    pass


class AuthRejected(ShadowRangeError):
    pass


class NoFreePort(ShadowRangeError):
    pass


class EmptyPort(ShadowRangeError):
    pass


class NotFound(ShadowRangeError):
    pass


# cryptokit
class InvalidPublic(ShadowRangeError):
    pass


class TagMismatch(ShadowRangeError):
    pass


class CounterReplay(ShadowRangeError):
    pass


class BadLength(ShadowRangeError):
    pass


# attackchain
class NoAccessVector(ShadowRangeError):
    pass


class PreconditionFailed(ShadowRangeError):
    def __init__(self, which: str, message: str = ""):
        super().__init__(message or f"precondition failed: {which}")
        self.which = which


class TransportUnreachable(ShadowRangeError):
    pass


class MalformedHandshake(ShadowRangeError):
    pass


class ChannelClosed(ShadowRangeError):
    pass


class FirmwareAuthBlocked(ShadowRangeError):
    pass


class StageViolation(ShadowRangeError):
    pass


class NoDarkSpace(ShadowRangeError):
    pass


class UnknownFunction(ShadowRangeError):
    pass


class HiddenStoreFull(ShadowRangeError):
    pass


class Blocked(ShadowRangeError):
    pass


class NoChannel(ShadowRangeError):
    pass


class StageNotSucceeded(ShadowRangeError):
    pass


class NoShipment(ShadowRangeError):
    pass


# defense
class NoBaseline(ShadowRangeError):
    pass


# scenario / event log
class ParseError(ShadowRangeError):
    def __init__(self, message: str, line: int | None = None):
        loc = f"line {line}: " if line is not None else ""
        super().__init__(f"{loc}{message}")
        self.line = line


class UnknownReference(ParseError):
    pass


class CorruptLog(ShadowRangeError):
    pass


class VersionMismatch(ShadowRangeError):
    pass
