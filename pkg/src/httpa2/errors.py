"""Exception hierarchy shared by the protocol modules."""

from __future__ import annotations


class HttpaError(Exception):
    """Base class for every protocol-level failure."""


class ProtocolReject(HttpaError):
    """A security or protocol check failed; ``reason`` is a stable token."""

    reason = "rejected"

    def __init__(self, reason: str | None = None, detail: str = ""):
        if reason is not None:
            self.reason = reason
        super().__init__(detail or self.reason)


# wire
class MalformedMessage(HttpaError):
    pass


class OversizeMessage(MalformedMessage):
    pass


class InvalidMessage(HttpaError):
    pass


class AmbiguousRequest(HttpaError):
    pass


# crypto
class NoCommonSuite(ProtocolReject):
    reason = "no-common-suite"


class NoCommonGroup(ProtocolReject):
    reason = "no-common-group"


class UnsupportedGroup(HttpaError):
    pass


class InvalidPeerShare(ProtocolReject):
    reason = "invalid-peer-share"


class AuthenticationFailure(ProtocolReject):
    reason = "authentication-failure"


class NonceExhausted(HttpaError):
    pass


class NonceReuse(HttpaError):
    pass


class MalformedPadding(HttpaError):
    pass


# attest
class UnknownQuoteType(ProtocolReject):
    reason = "unknown-quote-type"


class MalformedQuote(ProtocolReject):
    reason = "malformed-quote"


# handshake
class MissingField(ProtocolReject):
    reason = "missing-field"


class NegotiationFailure(ProtocolReject):
    reason = "negotiation-failure"


class NegotiationMismatch(ProtocolReject):
    reason = "negotiation-mismatch"


class QuoteRejected(ProtocolReject):
    reason = "quote-rejected"


class ClientQuoteRejected(ProtocolReject):
    reason = "client-quote-rejected"


class ResourceExhausted(ProtocolReject):
    reason = "resource-exhausted"


# session
class SessionInactive(HttpaError):
    pass


class AlreadyTerminated(HttpaError):
    pass


class OverlappingRegions(HttpaError):
    pass


class RegionOutOfBounds(HttpaError):
    pass


class SecretRejected(ProtocolReject):
    reason = "secret-rejected"


class UnknownBase(ProtocolReject):
    reason = "unknown-base"


# middlebox / harness
class UpstreamUnreachable(HttpaError):
    pass


class EnvironmentFailure(HttpaError):
    pass


class PreflightRejected(ProtocolReject):
    reason = "preflight-rejected"
