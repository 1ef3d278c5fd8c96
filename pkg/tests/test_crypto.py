import pytest
from cryptography.hazmat.primitives import hashes
from cryptography.hazmat.primitives.ciphers.aead import AESGCM
from cryptography.hazmat.primitives.kdf.hkdf import HKDF, HKDFExpand
from hypothesis import given, settings, strategies as st

from httpa2 import crypto
from httpa2.crypto import SUITES, KeyShare
from httpa2.errors import (
    AuthenticationFailure,
    InvalidPeerShare,
    MalformedPadding,
    NoCommonGroup,
    NoCommonSuite,
    NonceExhausted,
    NonceReuse,
    UnsupportedGroup,
)
from httpa2.harness import seeded_rng

AES = SUITES["HTTPA-AES128GCM-SHA256"]
CHACHA = SUITES["HTTPA-CHACHA20POLY1305-SHA256"]


# -- published vectors -------------------------------------------------------


def test_hkdf_rfc5869_case1():
    ikm = bytes.fromhex("0b" * 22)
    salt = bytes.fromhex("000102030405060708090a0b0c")
    info = bytes.fromhex("f0f1f2f3f4f5f6f7f8f9")
    prk = crypto.hkdf_extract(salt, ikm)
    assert prk.hex() == "077709362c2e32df0ddc3f0dc47bba6390b6c73bb50f9c3122ec844ad7c2b3e5"
    okm = crypto.hkdf_expand(prk, info, 42)
    assert okm.hex() == "3cb25f25faacd57a90434f64d0362f2a2d2d0a90cf1a5a4c5db02d56ecc4c5bf34007208d5b887185865"


def test_x25519_rfc7748():
    a_priv = bytes.fromhex("77076d0a7318a57d3c16c17251b26645df4c2f87ebc0992ab177fba51db92c2a")
    b_priv = bytes.fromhex("5dab087e624a8a4b79e17f8b83800ee66f3bb1292618b6fd1c2f8b27ff88e0eb")
    a_pub = bytes.fromhex("8520f0098930a754748b7ddcb43ef75a0dbf3a0d26381af4eba4a98eaa9b4e6a")
    b_pub = bytes.fromhex("de9edb7d7b7dc1b4d35b61c2ece435373f8343c85b78674dadfc7e146f882b4f")
    shared = bytes.fromhex("4a5d9d5ba4ce2de1728e3bf480350f25e07e21c947d19e3376f09b3c1e161742")
    a = crypto.generate_key_share("x25519", lambda n: a_priv)
    b = crypto.generate_key_share("x25519", lambda n: b_priv)
    assert a.public == a_pub and b.public == b_pub
    assert crypto.derive_shared_secret(a, b_pub) == shared
    assert crypto.derive_shared_secret(b, a_pub) == shared


def test_aes128gcm_nist_zero_vector():
    key, iv = bytes(16), bytes(12)
    assert crypto.seal(AES, key, iv, 0, b"", b"").hex() == "58e2fccefa7e3061367f1d57a4e7455a"


# -- HKDF against an independent implementation ------------------------------


@given(st.binary(max_size=64), st.binary(min_size=1, max_size=64), st.binary(max_size=40), st.integers(1, 255))
def test_hkdf_matches_library(salt, ikm, info, length):
    ours = crypto.hkdf_expand(crypto.hkdf_extract(salt, ikm), info, length)
    theirs = HKDF(hashes.SHA256(), length, salt or None, info).derive(ikm)
    assert ours == theirs


def test_hkdf_length_limit():
    with pytest.raises(ValueError):
        crypto.hkdf_expand(bytes(32), b"", 255 * 32 + 1)
    assert crypto.hkdf_expand(bytes(32), b"x", 255 * 32) == HKDFExpand(hashes.SHA256(), 255 * 32, b"x").derive(bytes(32))


# -- key exchange -------------------------------------------------------------


@pytest.mark.parametrize("group", ["x25519", "secp256r1"])
def test_ecdhe_agreement(group):
    a = crypto.generate_key_share(group, seeded_rng(1, "a"))
    b = crypto.generate_key_share(group, seeded_rng(1, "b"))
    assert len(a.public) == crypto.GROUPS[group]
    assert crypto.derive_shared_secret(a, b.public) == crypto.derive_shared_secret(b, a.public)


def test_invalid_peer_shares():
    a = crypto.generate_key_share("x25519")
    with pytest.raises(InvalidPeerShare):
        crypto.derive_shared_secret(a, b"\x01" * 31)
    with pytest.raises(InvalidPeerShare):
        crypto.derive_shared_secret(a, bytes(32))  # low-order point
    p = crypto.generate_key_share("secp256r1")
    with pytest.raises(InvalidPeerShare):
        crypto.derive_shared_secret(p, b"\x04" + b"\x01" * 64)
    with pytest.raises(UnsupportedGroup):
        crypto.generate_key_share("ffdhe2048")


def test_erased_share_cannot_be_used():
    a = crypto.generate_key_share("x25519")
    peer = crypto.generate_key_share("x25519").public
    a.erase()
    assert a.private is None
    with pytest.raises(ValueError):
        crypto.derive_shared_secret(a, peer)


def test_private_key_hidden_from_repr():
    a = crypto.generate_key_share("x25519")
    assert a.private.hex() not in repr(a)


def test_negotiate_prefers_client_order():
    suite, group = crypto.negotiate(
        ["HTTPA-CHACHA20POLY1305-SHA256", "HTTPA-AES128GCM-SHA256"], ["secp256r1", "x25519"], SUITES, ["x25519", "secp256r1"]
    )
    assert suite is CHACHA and group == "secp256r1"
    with pytest.raises(NoCommonSuite):
        crypto.negotiate(["X"], ["x25519"], SUITES, ["x25519"])
    with pytest.raises(NoCommonGroup):
        crypto.negotiate(["HTTPA-AES128GCM-SHA256"], ["x448"], SUITES, ["x25519"])


# -- key schedule -------------------------------------------------------------


@pytest.mark.parametrize("suite", [AES, CHACHA])
def test_key_schedule_shapes_and_distinctness(suite):
    keys = crypto.derive_key_schedule(suite, b"s" * 32, b"c" * 32, b"r" * 32, b"t" * 32)
    assert len(keys.client_write_key) == suite.key_len and len(keys.client_iv) == 12
    assert len(set(keys.material())) == 7
    assert keys.client_write_key.hex() not in repr(keys)


def test_key_schedule_depends_on_every_input():
    base = (b"s" * 32, b"c" * 32, b"r" * 32, b"t" * 32)
    ref = crypto.derive_key_schedule(AES, *base)
    for i in range(4):
        changed = list(base)
        changed[i] = b"x" * 32
        assert crypto.derive_key_schedule(AES, *changed).client_write_key != ref.client_write_key


# -- AEAD and nonces ----------------------------------------------------------


@pytest.mark.parametrize("suite", [AES, CHACHA])
@given(pt=st.binary(max_size=200), aad=st.binary(max_size=50), seq=st.integers(0, 2**64 - 2))
@settings(max_examples=40)
def test_seal_open_round_trip(suite, pt, aad, seq):
    key, iv = b"k" * suite.key_len, b"i" * 12
    ct = crypto.seal(suite, key, iv, seq, pt, aad)
    assert crypto.open_(suite, key, iv, seq, ct, aad) == pt


def test_open_rejects_any_change():
    key, iv = bytes(16), bytes(12)
    ct = crypto.seal(AES, key, iv, 5, b"hello", b"aad")
    for bad in (
        lambda: crypto.open_(AES, key, iv, 6, ct, b"aad"),
        lambda: crypto.open_(AES, key, iv, 5, ct, b"aaD"),
        lambda: crypto.open_(AES, key, iv, 5, bytes([ct[0] ^ 1]) + ct[1:], b"aad"),
        lambda: crypto.open_(AES, key, iv, 5, ct[:4], b"aad"),
    ):
        with pytest.raises(AuthenticationFailure):
            bad()


def test_nonce_is_iv_xor_sequence():
    iv = bytes.fromhex("000102030405060708090a0b")
    assert crypto.make_nonce(iv, 1) == bytes.fromhex("000102030405060708090a0a")
    assert crypto.make_nonce(iv, 0) == iv
    ct = crypto.seal(AES, bytes(16), iv, 7, b"x", b"")
    assert ct == AESGCM(bytes(16)).encrypt(crypto.make_nonce(iv, 7), b"x", b"")


def test_nonce_exhaustion():
    with pytest.raises(NonceExhausted):
        crypto.make_nonce(bytes(12), 2**64 - 1)
    counter = crypto.SequenceCounter(2**64 - 2)
    with pytest.raises(NonceExhausted):
        counter.next()


def test_nonce_tracker_detects_reuse():
    tracker = crypto.NonceTracker()
    crypto.seal(AES, bytes(16), bytes(12), 1, b"a", b"", tracker)
    crypto.seal(AES, bytes(16), bytes(12), 2, b"a", b"", tracker)
    with pytest.raises(NonceReuse):
        crypto.seal(AES, bytes(16), bytes(12), 1, b"b", b"", tracker)


def test_subsequence_slots_do_not_collide():
    seen = {crypto.subseq(s, slot) for s in range(1, 4) for slot in (0, 1, crypto.SECRET_SLOT, crypto.METADATA_SLOT)}
    assert len(seen) == 12
    with pytest.raises(ValueError):
        crypto.subseq(1, 0x10000)


def test_secret_wrapping_binds_index():
    w = crypto.wrap_secret(AES, bytes(16), bytes(12), 3, 0, b"secret")
    assert crypto.unwrap_secret(AES, bytes(16), bytes(12), 3, 0, w) == b"secret"
    with pytest.raises(AuthenticationFailure):
        crypto.unwrap_secret(AES, bytes(16), bytes(12), 3, 1, w)


# -- sequential acceptance ----------------------------------------------------


def test_sequential_nonce_modes():
    c = crypto.SequenceCounter()
    assert crypto.accept_sequential_nonce(c, 1, strict=True)
    assert not crypto.accept_sequential_nonce(c, 3, strict=True)
    assert crypto.accept_sequential_nonce(c, 2, strict=True)
    assert not crypto.accept_sequential_nonce(c, 2, strict=True)
    lenient = crypto.SequenceCounter()
    assert crypto.accept_sequential_nonce(lenient, 5, strict=False)
    assert not crypto.accept_sequential_nonce(lenient, 4, strict=False)
    assert lenient.value == 5


# -- padding ------------------------------------------------------------------


@given(st.binary(max_size=300), st.integers(1, 128))
def test_padding_round_trip(body, block):
    padded = crypto.pad(body, block)
    assert len(padded) % block == 0 and len(padded) > len(body)
    assert crypto.unpad(padded) == body


def test_unpad_rejects_missing_marker():
    with pytest.raises(MalformedPadding):
        crypto.unpad(b"abc\x00\x00")
    with pytest.raises(MalformedPadding):
        crypto.unpad(b"")
