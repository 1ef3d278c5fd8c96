"""Protected traffic after the handshake.

Tickets authenticate requests, binders tie each response to its request,
cargo carries selectively encrypted body regions, and AtSP provisions
index-addressable secrets into an attest base.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field, replace
from typing import TYPE_CHECKING, Callable, Sequence

from . import crypto
from . import fields as sf
from .crypto import SequenceCounter, SessionKeys
from .errors import (
    AuthenticationFailure,
    OverlappingRegions,
    RegionOutOfBounds,
    SessionInactive,
)
from .verdict import ACCEPT, Verdict
from .wire import AttestHeaderLine, Message, attest_lines, canonical_transcript

if TYPE_CHECKING:
    from .handshake import AttestBase, Registry

log = logging.getLogger(__name__)

TERMINATION_METHODS = ("cleanup", "destroy", "keep")
SESSION_KEY_INDEX = -1


@dataclass
class Session:
    """Client-side view of an established attest base."""

    base_id: str
    keys: SessionKeys
    expires_at: float
    send_counter: SequenceCounter = field(default_factory=SequenceCounter)
    recv_counter: SequenceCounter = field(default_factory=SequenceCounter)
    secrets: list = field(default_factory=list, repr=False)
    service_secrets: list = field(default_factory=list, repr=False)
    strict: bool = False
    active: bool = True
    tracker: crypto.NonceTracker | None = None

    @property
    def suite(self) -> crypto.CipherSuite:
        return self.keys.suite


@dataclass(frozen=True)
class Ticket:
    seq: int
    tag: bytes

    def to_ahl(self) -> AttestHeaderLine:
        return AttestHeaderLine("Attest-Ticket", sf.Item(self.tag, {"seq": self.seq}))


@dataclass(frozen=True)
class Region:
    offset: int
    length: int
    key_index: int = SESSION_KEY_INDEX
    kind: str = "encrypted"
    content_type: str = "application/octet-stream"


# ---------------------------------------------------------------------------
# Tickets
# ---------------------------------------------------------------------------


def _ticket_aad(request: Message, ahls: Sequence[AttestHeaderLine], seq: int) -> bytes:
    line = f"{request.method} {request.target}\n".encode("utf-8")
    return canonical_transcript(ahls) + line + seq.to_bytes(8, "big")


def build_ticket(session: Session, request: Message) -> AttestHeaderLine:
    """Allocate the next sequence number and compute the request's ticket."""
    if not session.active:
        raise SessionInactive("session is not active")
    if request.has("Attest-Ticket"):
        raise ValueError("request already carries a ticket")
    seq = session.send_counter.next()
    aad = _ticket_aad(request, attest_lines(request), seq)
    keys = session.keys
    tag = crypto.seal(keys.suite, keys.ticket_key, keys.client_iv, seq, b"", aad, session.tracker)
    return Ticket(seq, tag).to_ahl()


def attach_ticket(session: Session, request: Message) -> tuple[Message, Ticket]:
    ahl = build_ticket(session, request)
    ticket = Ticket(ahl.value.params["seq"], ahl.value.value)
    name, value = ahl.to_header()
    return request.with_trailer(name, value), ticket


def parse_ticket(request: Message) -> Ticket | None:
    if not request.trailers or request.trailers[-1][0].lower() != "attest-ticket":
        return None
    try:
        item = sf.parse_item(request.trailers[-1][1])
    except sf.FieldSyntaxError:
        return None
    seq = item.param("seq")
    if not isinstance(item.value, bytes) or isinstance(seq, bool) or not isinstance(seq, int) or seq < 0:
        return None
    return Ticket(seq, item.value)


def validate_ticket(base: "AttestBase", request: Message, strict: bool) -> Verdict:
    """Check the ticket MAC, then the sequence; advance only on success."""
    if not request.trailers or request.trailers[-1][0].lower() != "attest-ticket":
        return Verdict.reject("missing-ticket")
    ticket = parse_ticket(request)
    if ticket is None:
        return Verdict.reject("bad-mac")
    try:
        aad = _ticket_aad(request, attest_lines(request, drop_last_trailer=True), ticket.seq)
        keys = base.keys
        crypto.open_(keys.suite, keys.ticket_key, keys.client_iv, ticket.seq, ticket.tag, aad)
    except (sf.FieldSyntaxError, AuthenticationFailure, crypto.NonceExhausted, ValueError):
        return Verdict.reject("bad-mac")
    if not crypto.accept_sequential_nonce(base.recv_counter, ticket.seq, strict):
        return Verdict.reject("replay")
    return ACCEPT


# ---------------------------------------------------------------------------
# Binders
# ---------------------------------------------------------------------------


def _binder_aad(ahls: Sequence[AttestHeaderLine], ticket: Ticket) -> bytes:
    return canonical_transcript(ahls) + ticket.seq.to_bytes(8, "big") + ticket.tag


def build_binder(keys: SessionKeys, response: Message, ticket: Ticket, tracker=None) -> AttestHeaderLine:
    aad = _binder_aad(attest_lines(response), ticket)
    tag = crypto.seal(keys.suite, keys.binder_key, keys.service_iv, ticket.seq, b"", aad, tracker)
    return AttestHeaderLine("Attest-Binder", sf.Item(tag))


def attach_binder(keys: SessionKeys, response: Message, ticket: Ticket, tracker=None) -> Message:
    name, value = build_binder(keys, response, ticket, tracker).to_header()
    return response.with_trailer(name, value)


def validate_binder(keys: SessionKeys, response: Message, ticket: Ticket) -> Verdict:
    if not response.trailers or response.trailers[-1][0].lower() != "attest-binder":
        return Verdict.reject("missing-binder")
    try:
        item = sf.parse_item(response.trailers[-1][1])
        if not isinstance(item.value, bytes) or item.params:
            return Verdict.reject("bad-binder")
        aad = _binder_aad(attest_lines(response, drop_last_trailer=True), ticket)
        crypto.open_(keys.suite, keys.binder_key, keys.service_iv, ticket.seq, item.value, aad)
    except (sf.FieldSyntaxError, AuthenticationFailure):
        return Verdict.reject("bad-binder")
    return ACCEPT


# ---------------------------------------------------------------------------
# Trusted cargo
# ---------------------------------------------------------------------------


def _direction_keys(keys: SessionKeys, direction: str) -> tuple[bytes, bytes]:
    if direction == "client":
        return keys.client_write_key, keys.client_iv
    if direction == "service":
        return keys.service_write_key, keys.service_iv
    raise ValueError(f"unknown direction {direction!r}")


def _region_key(keys: SessionKeys, direction: str, key_index: int, secrets: Sequence[bytes]) -> bytes:
    if key_index == SESSION_KEY_INDEX:
        return _direction_keys(keys, direction)[0]
    if 0 <= key_index < len(secrets):
        return crypto.derive_secret_key(keys.suite, secrets[key_index])
    raise KeyError(key_index)


def _check_regions(body: bytes, regions: Sequence[Region]) -> list[Region]:
    ordered = sorted(regions, key=lambda r: r.offset)
    end = 0
    for r in ordered:
        if r.offset < 0 or r.length < 0 or r.offset + r.length > len(body):
            raise RegionOutOfBounds(f"region {r.offset}+{r.length} outside body of {len(body)} bytes")
        if r.offset < end:
            raise OverlappingRegions(f"region at {r.offset} overlaps previous region")
        if r.kind not in ("encrypted", "signed"):
            raise ValueError(f"unknown region kind {r.kind!r}")
        end = r.offset + r.length
    if len(ordered) > crypto.MAX_REGIONS:
        raise ValueError("too many regions")
    return ordered


def seal_cargo(
    keys: SessionKeys,
    direction: str,
    seq: int,
    body: bytes,
    regions: Sequence[Region],
    secrets: Sequence[bytes] = (),
    pad_block: int = 0,
    tracker=None,
) -> tuple[bytes, AttestHeaderLine]:
    """Encrypt or sign the given body regions in place.

    Offsets in ``regions`` refer to ``body``; offsets in the sealed metadata
    refer to the returned body.
    """
    ordered = _check_regions(body, regions)
    suite = keys.suite
    _, iv = _direction_keys(keys, direction)
    out = bytearray()
    entries = []
    cursor = 0
    for i, r in enumerate(ordered):
        out += body[cursor : r.offset]
        chunk = body[r.offset : r.offset + r.length]
        key = _region_key(keys, direction, r.key_index, secrets)
        entry = {"ki": r.key_index, "off": len(out), "len": 0, "kind": r.kind, "ct": r.content_type}
        if r.kind == "encrypted":
            if pad_block:
                chunk = crypto.pad(chunk, pad_block)
                entry["pad"] = 1
            sealed = crypto.seal(suite, key, iv, crypto.subseq(seq, i), chunk, b"httpa2 region", tracker)
            out += sealed
            entry["len"] = len(sealed)
        else:
            tag = crypto.seal(suite, key, iv, crypto.subseq(seq, i), b"", b"httpa2 signed" + chunk, tracker)
            out += chunk
            entry["len"] = len(chunk)
            entry["tag"] = sf.b64url_encode(tag)
        entries.append(entry)
        cursor = r.offset + r.length
    out += body[cursor:]
    metadata = json.dumps(entries, separators=(",", ":")).encode("ascii")
    write_key, _ = _direction_keys(keys, direction)
    sealed_meta = crypto.seal(suite, write_key, iv, crypto.subseq(seq, crypto.METADATA_SLOT), metadata, b"httpa2 cargo", tracker)
    return bytes(out), AttestHeaderLine("Attest-Cargo", sf.Item(sealed_meta))


def open_cargo(
    keys: SessionKeys,
    direction: str,
    seq: int,
    body: bytes,
    cargo_value: bytes,
    secrets: Sequence[bytes] = (),
) -> tuple[bytes, list[Region]]:
    """Invert :func:`seal_cargo`; returns the plaintext body and its regions."""
    suite = keys.suite
    write_key, iv = _direction_keys(keys, direction)
    try:
        item = sf.parse_item(cargo_value)
    except sf.FieldSyntaxError:
        raise AuthenticationFailure(detail="malformed cargo field") from None
    if not isinstance(item.value, bytes):
        raise AuthenticationFailure(detail="cargo must be a byte sequence")
    metadata = crypto.open_(suite, write_key, iv, crypto.subseq(seq, crypto.METADATA_SLOT), item.value, b"httpa2 cargo")
    try:
        entries = json.loads(metadata)
    except ValueError:
        raise AuthenticationFailure(detail="cargo metadata is not JSON") from None

    out = bytearray()
    regions = []
    cursor = 0
    for i, e in enumerate(entries):
        off, length = e["off"], e["len"]
        if off < cursor or off + length > len(body):
            raise RegionOutOfBounds("cargo region outside body")
        out += body[cursor:off]
        chunk = body[off : off + length]
        try:
            key = _region_key(keys, direction, e["ki"], secrets)
        except KeyError:
            raise AuthenticationFailure(detail=f"no key for index {e['ki']}") from None
        start = len(out)
        if e["kind"] == "encrypted":
            plain = crypto.open_(suite, key, iv, crypto.subseq(seq, i), chunk, b"httpa2 region")
            if e.get("pad"):
                try:
                    plain = crypto.unpad(plain)
                except Exception:
                    raise AuthenticationFailure(detail="bad region padding") from None
            out += plain
        else:
            tag = sf.b64url_decode(e["tag"])
            crypto.open_(suite, key, iv, crypto.subseq(seq, i), tag, b"httpa2 signed" + chunk)
            out += chunk
        regions.append(Region(start, len(out) - start, e["ki"], e["kind"], e.get("ct", "application/octet-stream")))
        cursor = off + length
    out += body[cursor:]
    return bytes(out), regions


# ---------------------------------------------------------------------------
# Secret provisioning and trusted requests (service side)
# ---------------------------------------------------------------------------


@dataclass
class AppRequest:
    method: str
    target: str
    headers: tuple
    body: bytes
    regions: list
    base_id: str | None = None


@dataclass
class AppResponse:
    status: int = 200
    headers: tuple = ()
    body: bytes = b""
    regions: list = field(default_factory=list)


AppHandler = Callable[[AppRequest], AppResponse]


@dataclass
class Handled:
    """Result of a protected exchange on the service side."""

    response: Message
    reason: str | None = None
    plaintext: AppRequest | None = None


def forbidden(date_header: tuple) -> Message:
    return Message.response(403, headers=date_header, body=b"Forbidden\n")


def handle_atsp(base: "AttestBase", req: Message, registry: "Registry", *, strict: bool, date_header: tuple = (), tracker=None) -> Handled:
    """Unwrap and store the request's secrets; any failure terminates the base."""
    verdict = validate_ticket(base, req, strict)
    if not verdict:
        return Handled(forbidden(date_header), verdict.reason)
    ticket = parse_ticket(req)
    keys = base.keys
    unwrapped = []
    try:
        for raw in req.get_all("Attest-Secrets"):
            for item in sf.parse_list(raw):
                if not isinstance(item.value, bytes):
                    raise AuthenticationFailure(detail="wrapped secret must be bytes")
                unwrapped.append(
                    crypto.unwrap_secret(keys.suite, keys.client_write_key, keys.client_iv, ticket.seq, len(unwrapped), item.value)
                )
        if req.has("Attest-Cargo"):
            open_cargo(keys, "client", ticket.seq, req.body, req.get("Attest-Cargo"), base.secret_store)
    except (AuthenticationFailure, sf.FieldSyntaxError) as exc:
        log.warning("secret provisioning failed on base %s: %s", base.base_id, exc)
        registry.terminate(base, "destroy")
        return Handled(forbidden(date_header), "secret-rejected")
    base.secret_store.extend(unwrapped)
    response = Message.response(200, headers=date_header)
    return Handled(attach_binder(keys, response, ticket, tracker))


def handle_trr(
    base: "AttestBase",
    req: Message,
    registry: "Registry",
    app: AppHandler,
    *,
    strict: bool,
    pad_block: int = 0,
    date_header: tuple = (),
    tracker=None,
) -> Handled:
    termination = req.get("Attest-Base-Termination")
    verdict = validate_ticket(base, req, strict)
    if not verdict:
        return Handled(forbidden(date_header), verdict.reason)
    ticket = parse_ticket(req)
    keys = base.keys
    method = None
    if termination is not None:
        method = termination.decode("ascii", "replace").strip()
        if method not in TERMINATION_METHODS:
            return Handled(Message.response(400, headers=date_header, body=b"Bad Request\n"), "bad-termination")

    body, regions = req.body, []
    if req.has("Attest-Cargo"):
        try:
            body, regions = open_cargo(keys, "client", ticket.seq, req.body, req.get("Attest-Cargo"), base.secret_store)
        except (AuthenticationFailure, RegionOutOfBounds, KeyError, TypeError, ValueError):
            return Handled(forbidden(date_header), "bad-cargo")

    view = AppRequest(
        req.method,
        req.target,
        tuple((n, v) for n, v in req.headers if not n.lower().startswith("attest-")),
        body,
        regions,
        base.base_id,
    )
    result = app(view)
    out_body = result.body
    trailers = []
    if result.regions:
        out_body, cargo = seal_cargo(keys, "service", ticket.seq, result.body, result.regions, base.secret_store, pad_block, tracker)
        trailers.append(cargo.to_header())
    response = Message.response(result.status, headers=tuple(date_header) + tuple(result.headers), body=out_body, trailers=trailers)
    response = attach_binder(keys, response, ticket, tracker)
    if method is not None:
        registry.terminate(base, method)
    return Handled(response, None, view)


# ---------------------------------------------------------------------------
# Client-side helpers
# ---------------------------------------------------------------------------


def wrap_secrets(session: Session, seq: int, secrets: Sequence[bytes]) -> AttestHeaderLine:
    keys = session.keys
    items = [
        sf.Item(crypto.wrap_secret(keys.suite, keys.client_write_key, keys.client_iv, seq, j, s, session.tracker))
        for j, s in enumerate(secrets)
    ]
    return AttestHeaderLine("Attest-Secrets", items)


def protect_request(
    session: Session,
    request: Message,
    regions: Sequence[Region] = (),
    secrets: Sequence[bytes] = (),
    corrupt_secret: int | None = None,
) -> tuple[Message, Ticket]:
    """Add cargo, wrapped secrets and the ticket to an outgoing request.

    ``corrupt_secret`` flips one bit of that wrapped secret before ticketing;
    it exists to exercise the service's provisioning failure path.
    """
    if not session.active:
        raise SessionInactive("session is not active")
    seq = session.send_counter.value + 1
    if secrets:
        ahl = wrap_secrets(session, seq, secrets)
        if corrupt_secret is not None:
            items = list(ahl.value)
            bad = bytearray(items[corrupt_secret].value)
            bad[0] ^= 0x01
            items[corrupt_secret] = sf.Item(bytes(bad))
            ahl = AttestHeaderLine("Attest-Secrets", items)
        request = request.with_header(*ahl.to_header())
    if regions:
        body, cargo = seal_cargo(session.keys, "client", seq, request.body, regions, session.secrets, tracker=session.tracker)
        request = replace(request, body=body).with_trailer(*cargo.to_header())
    return attach_ticket(session, request)
