"""Cipher suites, (EC)DHE key shares, the HKDF key schedule and AEAD sealing."""

from __future__ import annotations

import hashlib
import hmac
import os
from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

from cryptography.exceptions import InvalidTag
from cryptography.hazmat.primitives import serialization
from cryptography.hazmat.primitives.asymmetric import ec, x25519
from cryptography.hazmat.primitives.ciphers.aead import AESGCM, ChaCha20Poly1305

from .errors import (
    AuthenticationFailure,
    InvalidPeerShare,
    MalformedPadding,
    NoCommonGroup,
    NoCommonSuite,
    NonceExhausted,
    NonceReuse,
    UnsupportedGroup,
)

RandomSource = Callable[[int], bytes]

SEQ_MAX = 2**64 - 1
RANDOM_LEN = 32


@dataclass(frozen=True)
class CipherSuite:
    id: str
    aead: str
    hash: str
    key_len: int
    iv_len: int = 12
    tag_len: int = 16

    def aead_cipher(self, key: bytes):
        if self.aead == "AES-128-GCM":
            return AESGCM(key)
        return ChaCha20Poly1305(key)


SUITES: dict[str, CipherSuite] = {
    s.id: s
    for s in (
        CipherSuite("HTTPA-AES128GCM-SHA256", "AES-128-GCM", "SHA-256", key_len=16),
        CipherSuite("HTTPA-CHACHA20POLY1305-SHA256", "ChaCha20-Poly1305", "SHA-256", key_len=32),
    )
}

GROUPS: dict[str, int] = {"x25519": 32, "secp256r1": 65}


def get_suite(suite_id: str) -> CipherSuite:
    try:
        return SUITES[suite_id]
    except KeyError:
        raise NoCommonSuite(detail=f"unknown cipher suite {suite_id!r}") from None


def negotiate(
    client_suites: Sequence[str],
    client_groups: Sequence[str],
    service_suites: Iterable[str],
    service_groups: Iterable[str],
) -> tuple[CipherSuite, str]:
    """Pick the first client-preferred suite and group the service supports."""
    service_suites = set(service_suites)
    service_groups = set(service_groups)
    suite = next((s for s in client_suites if s in service_suites and s in SUITES), None)
    if suite is None:
        raise NoCommonSuite()
    group = next((g for g in client_groups if g in service_groups and g in GROUPS), None)
    if group is None:
        raise NoCommonGroup()
    return SUITES[suite], group


# ---------------------------------------------------------------------------
# Key exchange
# ---------------------------------------------------------------------------


@dataclass
class KeyShare:
    group: str
    public: bytes
    private: bytes | None = field(default=None, repr=False)

    def erase(self) -> None:
        self.private = None

    def public_only(self) -> "KeyShare":
        return KeyShare(self.group, self.public)


_P256_ORDER = int("FFFFFFFF00000000FFFFFFFFFFFFFFFFBCE6FAADA7179E84F3B9CAC2FC632551", 16)


def generate_key_share(group: str, rng: RandomSource = os.urandom) -> KeyShare:
    if group == "x25519":
        priv = rng(32)
        key = x25519.X25519PrivateKey.from_private_bytes(priv)
        public = key.public_key().public_bytes(serialization.Encoding.Raw, serialization.PublicFormat.Raw)
        return KeyShare(group, public, priv)
    if group == "secp256r1":
        while True:
            scalar = int.from_bytes(rng(32), "big")
            if 0 < scalar < _P256_ORDER:
                break
        key = ec.derive_private_key(scalar, ec.SECP256R1())
        public = key.public_key().public_bytes(serialization.Encoding.X962, serialization.PublicFormat.UncompressedPoint)
        return KeyShare(group, public, scalar.to_bytes(32, "big"))
    raise UnsupportedGroup(f"unsupported group {group!r}")


def derive_shared_secret(own: KeyShare, peer_public: bytes) -> bytes:
    if own.private is None:
        raise ValueError("key share private part already erased")
    expected = GROUPS.get(own.group)
    if expected is None:
        raise UnsupportedGroup(f"unsupported group {own.group!r}")
    if len(peer_public) != expected:
        raise InvalidPeerShare(detail=f"{own.group} share must be {expected} bytes")
    if own.group == "x25519":
        key = x25519.X25519PrivateKey.from_private_bytes(own.private)
        try:
            shared = key.exchange(x25519.X25519PublicKey.from_public_bytes(peer_public))
        except ValueError:
            raise InvalidPeerShare(detail="x25519 result is all zero") from None
        if not any(shared):
            raise InvalidPeerShare(detail="x25519 result is all zero")
        return shared
    key = ec.derive_private_key(int.from_bytes(own.private, "big"), ec.SECP256R1())
    try:
        peer = ec.EllipticCurvePublicKey.from_encoded_point(ec.SECP256R1(), peer_public)
    except ValueError:
        raise InvalidPeerShare(detail="point not on curve") from None
    return key.exchange(ec.ECDH(), peer)


# ---------------------------------------------------------------------------
# HKDF and the key schedule
# ---------------------------------------------------------------------------


def hkdf_extract(salt: bytes, ikm: bytes) -> bytes:
    if not salt:
        salt = bytes(hashlib.sha256().digest_size)
    return hmac.new(salt, ikm, hashlib.sha256).digest()


def hkdf_expand(prk: bytes, info: bytes, length: int) -> bytes:
    if length > 255 * 32:
        raise ValueError("HKDF output too long")
    out = bytearray()
    block = b""
    counter = 1
    while len(out) < length:
        block = hmac.new(prk, block + info + bytes([counter]), hashlib.sha256).digest()
        out += block
        counter += 1
    return bytes(out[:length])


LABELS = {
    "client_write_key": b"httpa2 c key",
    "service_write_key": b"httpa2 s key",
    "client_iv": b"httpa2 c iv",
    "service_iv": b"httpa2 s iv",
    "ticket_key": b"httpa2 ticket",
    "binder_key": b"httpa2 binder",
}


@dataclass(frozen=True)
class SessionKeys:
    suite: CipherSuite
    client_write_key: bytes = field(repr=False)
    service_write_key: bytes = field(repr=False)
    client_iv: bytes = field(repr=False)
    service_iv: bytes = field(repr=False)
    ticket_key: bytes = field(repr=False)
    binder_key: bytes = field(repr=False)
    master_secret: bytes = field(repr=False)

    def material(self) -> list[bytes]:
        """Every secret byte string, for leak scans in tests."""
        return [getattr(self, name) for name in LABELS] + [self.master_secret]


def derive_key_schedule(
    suite: CipherSuite,
    shared: bytes,
    client_random: bytes,
    service_random: bytes,
    transcript_hash: bytes,
) -> SessionKeys:
    master = hkdf_extract(client_random + service_random, shared)
    lengths = {
        "client_write_key": suite.key_len,
        "service_write_key": suite.key_len,
        "client_iv": suite.iv_len,
        "service_iv": suite.iv_len,
        "ticket_key": suite.key_len,
        "binder_key": suite.key_len,
    }
    derived = {name: hkdf_expand(master, LABELS[name] + transcript_hash, n) for name, n in lengths.items()}
    return SessionKeys(suite=suite, master_secret=master, **derived)


def derive_secret_key(suite: CipherSuite, secret: bytes) -> bytes:
    """AEAD key for cargo regions that reference a provisioned secret."""
    return hkdf_expand(hkdf_extract(b"", secret), b"httpa2 secret key", suite.key_len)


# ---------------------------------------------------------------------------
# AEAD with sequence-derived nonces
# ---------------------------------------------------------------------------


def make_nonce(iv: bytes, seq: int) -> bytes:
    if seq < 0:
        raise ValueError("sequence numbers are unsigned")
    if seq >= SEQ_MAX:
        raise NonceExhausted("sequence number space exhausted")
    padded = seq.to_bytes(len(iv), "big")
    return bytes(a ^ b for a, b in zip(iv, padded))


class NonceTracker:
    """Test-mode guard that fails on any repeated (key, nonce) pair."""

    def __init__(self):
        self.seen: set[tuple[bytes, bytes]] = set()

    def check(self, key: bytes, nonce: bytes) -> None:
        pair = (bytes(key), bytes(nonce))
        if pair in self.seen:
            raise NonceReuse("AEAD nonce reused under the same key")
        self.seen.add(pair)


def seal(
    suite: CipherSuite,
    key: bytes,
    iv: bytes,
    seq: int,
    plaintext: bytes,
    aad: bytes,
    tracker: NonceTracker | None = None,
) -> bytes:
    nonce = make_nonce(iv, seq)
    if tracker is not None:
        tracker.check(key, nonce)
    return suite.aead_cipher(key).encrypt(nonce, plaintext, aad)


def open_(suite: CipherSuite, key: bytes, iv: bytes, seq: int, ciphertext: bytes, aad: bytes) -> bytes:
    nonce = make_nonce(iv, seq)
    if len(ciphertext) < suite.tag_len:
        raise AuthenticationFailure(detail="ciphertext shorter than tag")
    try:
        return suite.aead_cipher(key).decrypt(nonce, ciphertext, aad)
    except InvalidTag:
        raise AuthenticationFailure() from None


# Per-message nonce sub-spaces: cargo regions use slots [0, 0x8000), wrapped
# secrets [0x8000, 0xFFFF) and the cargo metadata record the final slot.
SECRET_SLOT = 0x8000
METADATA_SLOT = 0xFFFF
MAX_REGIONS = SECRET_SLOT
MAX_SECRETS = METADATA_SLOT - SECRET_SLOT


def subseq(seq: int, slot: int) -> int:
    if not 0 <= slot <= METADATA_SLOT:
        raise ValueError("slot out of range")
    return (seq << 16) | slot


def wrap_secret(suite: CipherSuite, key: bytes, iv: bytes, seq: int, index: int, secret: bytes, tracker=None) -> bytes:
    if index >= MAX_SECRETS:
        raise ValueError("too many secrets in one message")
    aad = b"httpa2 secret" + index.to_bytes(4, "big")
    return seal(suite, key, iv, subseq(seq, SECRET_SLOT + index), secret, aad, tracker)


def unwrap_secret(suite: CipherSuite, key: bytes, iv: bytes, seq: int, index: int, wrapped: bytes) -> bytes:
    if index >= MAX_SECRETS:
        raise AuthenticationFailure(detail="secret index out of range")
    aad = b"httpa2 secret" + index.to_bytes(4, "big")
    return open_(suite, key, iv, subseq(seq, SECRET_SLOT + index), wrapped, aad)


# ---------------------------------------------------------------------------
# Sequential nonces
# ---------------------------------------------------------------------------


@dataclass
class SequenceCounter:
    value: int = 0

    def next(self) -> int:
        if self.value >= SEQ_MAX - 1:
            raise NonceExhausted("sequence counter exhausted")
        self.value += 1
        return self.value

    def reset(self) -> None:
        self.value = 0


def accept_sequential_nonce(counter: SequenceCounter, received: int, strict: bool) -> bool:
    if received < 0 or received >= SEQ_MAX:
        return False
    if strict:
        ok = received == counter.value + 1
    else:
        ok = received > counter.value
    if ok:
        counter.value = received
    return ok


# ---------------------------------------------------------------------------
# Padding
# ---------------------------------------------------------------------------


def pad(body: bytes, block: int) -> bytes:
    """0x80 then zeros up to the next multiple of ``block`` above len(body)."""
    if block < 1:
        raise ValueError("block must be positive")
    target = (len(body) // block + 1) * block
    return body + b"\x80" + b"\x00" * (target - len(body) - 1)


def unpad(padded: bytes) -> bytes:
    stripped = padded.rstrip(b"\x00")
    if not stripped or stripped[-1] != 0x80:
        raise MalformedPadding("missing 0x80 padding marker")
    return stripped[:-1]
