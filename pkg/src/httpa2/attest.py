"""Mock attestation: quote format, quoting service, verifier and appraisal.

The quote keeps the field semantics of a hardware quote (code identity,
ISV and TEE identity, SVN, user-defined data, nonce) but is signed with an
Ed25519 attestation key held by an in-process quoting service.
"""

from __future__ import annotations

import hashlib
import os
import struct
from dataclasses import dataclass, field, replace
from typing import Iterable, Sequence

from cryptography.exceptions import InvalidSignature
from cryptography.hazmat.primitives import serialization
from cryptography.hazmat.primitives.asymmetric import ed25519

from . import fields as sf
from .crypto import RandomSource
from .errors import MalformedQuote, UnknownQuoteType
from .verdict import ACCEPT, Verdict

QUOTE_TYPE = "mock-v1"
DIGEST_LEN = 32


@dataclass(frozen=True)
class Identity:
    """What a TService instance is: code measurement, vendor, platform, SVN."""

    measurement: bytes
    isv_id: str
    tee_id: str
    svn: int

    @classmethod
    def from_code(cls, code: bytes, isv_id: str = "isv-example", tee_id: str = "tee-mock", svn: int = 1) -> "Identity":
        return cls(hashlib.sha256(code).digest(), isv_id, tee_id, svn)


@dataclass(frozen=True)
class Quote:
    quote_type: str
    measurement: bytes
    isv_id: str
    tee_id: str
    svn: int
    qudd: bytes
    nonce: bytes
    signature: bytes = b""

    def signed_part(self) -> bytes:
        return _encode_fields(self._field_bytes())

    def _field_bytes(self) -> list[bytes]:
        return [
            self.quote_type.encode("utf-8"),
            self.measurement,
            self.isv_id.encode("utf-8"),
            self.tee_id.encode("utf-8"),
            struct.pack(">Q", self.svn),
            self.qudd,
            self.nonce,
        ]

    def encode(self) -> bytes:
        return _encode_fields(self._field_bytes() + [self.signature])

    @classmethod
    def decode(cls, data: bytes) -> "Quote":
        parts = _decode_fields(data)
        if len(parts) != 8:
            raise MalformedQuote(detail=f"expected 8 quote fields, got {len(parts)}")
        qtype, measurement, isv, tee, svn, qudd, nonce, sig = parts
        if len(svn) != 8:
            raise MalformedQuote(detail="svn must be 8 bytes")
        try:
            return cls(
                qtype.decode("utf-8"),
                measurement,
                isv.decode("utf-8"),
                tee.decode("utf-8"),
                struct.unpack(">Q", svn)[0],
                qudd,
                nonce,
                sig,
            )
        except UnicodeDecodeError:
            raise MalformedQuote(detail="identity fields must be UTF-8") from None

    def to_item(self, max_age: int | None = None) -> sf.Item:
        params: dict = {"type": sf.Token(self.quote_type)}
        if max_age is not None:
            params["max-age"] = max_age
        return sf.Item(self.encode(), params)

    @classmethod
    def from_item(cls, item: sf.Item) -> "Quote":
        if not isinstance(item.value, bytes):
            raise MalformedQuote(detail="quote must be a byte sequence")
        quote = cls.decode(item.value)
        if item.param("type") != quote.quote_type:
            raise MalformedQuote(detail="type parameter does not match quote body")
        return quote


def _encode_fields(parts: Iterable[bytes]) -> bytes:
    return b"".join(struct.pack(">I", len(p)) + p for p in parts)


def _decode_fields(data: bytes) -> list[bytes]:
    parts = []
    pos = 0
    while pos < len(data):
        if pos + 4 > len(data):
            raise MalformedQuote(detail="truncated length prefix")
        (n,) = struct.unpack_from(">I", data, pos)
        pos += 4
        if pos + n > len(data):
            raise MalformedQuote(detail="truncated quote field")
        parts.append(data[pos : pos + n])
        pos += n
    return parts


def compute_qudd(request_transcript: bytes, response_transcript: bytes = b"") -> bytes:
    return hashlib.sha256(request_transcript + b"\x00" + response_transcript).digest()


@dataclass(frozen=True)
class TrustAnchor:
    quote_type: str
    public_key: bytes


class QService:
    """Quoting service holding the attestation key for one quote type."""

    def __init__(self, quote_type: str = QUOTE_TYPE, seed: bytes | None = None, rng: RandomSource = os.urandom):
        self.quote_type = quote_type
        self._key = ed25519.Ed25519PrivateKey.from_private_bytes(seed if seed is not None else rng(32))

    def anchor(self) -> TrustAnchor:
        raw = self._key.public_key().public_bytes(serialization.Encoding.Raw, serialization.PublicFormat.Raw)
        return TrustAnchor(self.quote_type, raw)

    def generate_quote(self, identity: Identity, qudd: bytes, nonce: bytes) -> Quote:
        unsigned = Quote(
            self.quote_type,
            identity.measurement,
            identity.isv_id,
            identity.tee_id,
            identity.svn,
            qudd,
            nonce,
        )
        return replace(unsigned, signature=self._key.sign(unsigned.signed_part()))


@dataclass(frozen=True)
class VerificationReport:
    signature_valid: bool
    issues: tuple[str, ...]
    verified_qudd: bytes


class Verifier:
    """Checks signatures and structure; knows nothing about client policy.

    ``reference_measurements`` and ``tcb_min_svn`` model the verifier's own
    reference values, reported as issues rather than decisions.
    """

    def __init__(self, anchors: Iterable[TrustAnchor], reference_measurements: Iterable[bytes] = (), tcb_min_svn: int = 0):
        self.anchors: dict[str, TrustAnchor] = {}
        for anchor in anchors:
            if anchor.quote_type in self.anchors:
                raise ValueError(f"duplicate trust anchor for {anchor.quote_type!r}")
            self.anchors[anchor.quote_type] = anchor
        self.reference_measurements = frozenset(reference_measurements)
        self.tcb_min_svn = tcb_min_svn

    def verify_quote(self, quote: Quote) -> VerificationReport:
        anchor = self.anchors.get(quote.quote_type)
        if anchor is None:
            raise UnknownQuoteType(detail=f"no trust anchor for {quote.quote_type!r}")
        issues = []
        if len(quote.measurement) != DIGEST_LEN or len(quote.qudd) != DIGEST_LEN or not quote.isv_id or not quote.tee_id:
            issues.append("malformed")
        valid = True
        try:
            ed25519.Ed25519PublicKey.from_public_bytes(anchor.public_key).verify(quote.signature, quote.signed_part())
        except (InvalidSignature, ValueError):
            valid = False
            issues.insert(0, "bad-signature")
        if valid:
            if quote.svn < self.tcb_min_svn:
                issues.append("svn-below-minimum")
            if self.reference_measurements and quote.measurement not in self.reference_measurements:
                issues.append("unknown-measurement")
        return VerificationReport(valid, tuple(issues), quote.qudd)


@dataclass(frozen=True)
class AppraisalPolicy:
    min_svn: int = 0
    allowed_measurements: frozenset = field(default_factory=frozenset)
    require_known_isv: bool = False
    known_isvs: frozenset = field(default_factory=frozenset)
    tolerated_issues: frozenset = field(default_factory=frozenset)


def appraise(report: VerificationReport, quote: Quote, policy: AppraisalPolicy, expected_qudd: bytes, expected_nonce: bytes) -> Verdict:
    if not report.signature_valid:
        return Verdict.reject("bad-signature")
    if "malformed" in report.issues:
        return Verdict.reject("malformed-quote")
    if quote.qudd != expected_qudd:
        return Verdict.reject("qudd-mismatch")
    if quote.nonce != expected_nonce:
        return Verdict.reject("nonce-mismatch")
    for issue in report.issues:
        if issue not in policy.tolerated_issues:
            return Verdict.reject(issue)
    if quote.svn < policy.min_svn:
        return Verdict.reject("svn-below-minimum")
    if policy.allowed_measurements and quote.measurement not in policy.allowed_measurements:
        return Verdict.reject("unknown-measurement")
    if policy.require_known_isv and quote.isv_id not in policy.known_isvs:
        return Verdict.reject("unknown-isv")
    return ACCEPT


def appraise_quotes(
    quotes: Sequence[Quote],
    verifier: Verifier,
    policy: AppraisalPolicy,
    expected_qudd: bytes,
    expected_nonce: bytes,
    attestation: str = "direct",
) -> Verdict:
    """Appraise the quotes of one base.

    ``direct`` requires every instance quote to pass; ``indirect`` looks only
    at the contact instance, which is the first quote.
    """
    if not quotes:
        return Verdict.reject("missing-quotes")
    selected = quotes if attestation == "direct" else quotes[:1]
    for quote in selected:
        try:
            report = verifier.verify_quote(quote)
        except UnknownQuoteType:
            return Verdict.reject("unknown-quote-type")
        verdict = appraise(report, quote, policy, expected_qudd, expected_nonce)
        if not verdict:
            return verdict
    return ACCEPT
