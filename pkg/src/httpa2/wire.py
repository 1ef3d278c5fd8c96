"""HTTP/1.1 message model, Attest header lines and request classification."""

from __future__ import annotations

import enum
import io
import re
from dataclasses import dataclass, field, replace
from http import HTTPStatus
from typing import BinaryIO, Iterable, Sequence

from . import fields as sf
from .errors import AmbiguousRequest, InvalidMessage, MalformedMessage, OversizeMessage

MAX_BODY = 16 * 1024 * 1024
MAX_HEADER_SECTION = 64 * 1024

ATTEST_METHOD = "ATTEST"
ATTEST_PREFIX = "attest-"

FRAMING_HEADERS = frozenset({"content-length", "transfer-encoding"})

_TOKEN_RE = re.compile(rb"[!#$%&'*+\-.^_`|~0-9A-Za-z]+")
_STR_TOKEN_RE = re.compile(r"[!#$%&'*+\-.^_`|~0-9A-Za-z]+")
_CHUNK_SIZE_RE = re.compile(rb"[0-9A-Fa-f]{1,16}")

# Canonical capitalization and structured kind of every Attest-* field.
FIELD_KINDS: dict[str, str] = {
    "Attest-Versions": "list",
    "Attest-Cipher-Suites": "list",
    "Attest-Supported-Groups": "list",
    "Attest-Key-Shares": "list",
    "Attest-Random": "item",
    "Attest-Policies": "dict",
    "Attest-Base-Creation": "item",
    "Attest-Blocklist": "list",
    "Attest-Date": "item",
    "Attest-Quotes": "list",
    "Attest-Signatures": "list",
    "Attest-Transport": "item",
    "Attest-Version": "item",
    "Attest-Cipher-Suite": "item",
    "Attest-Supported-Group": "item",
    "Attest-Key-Share": "item",
    "Attest-Base-ID": "item",
    "Attest-Expires": "item",
    "Attest-Secrets": "list",
    "Attest-Cargo": "item",
    "Attest-Ticket": "item",
    "Attest-Binder": "item",
    "Attest-Base-Termination": "item",
}
_CANONICAL = {name.lower(): name for name in FIELD_KINDS}


def canonical_name(name: str) -> str:
    """Return the canonical capitalization for known Attest-* names."""
    return _CANONICAL.get(name.lower(), name)


def is_attest(name: str) -> bool:
    return name.lower().startswith(ATTEST_PREFIX)


def _as_bytes(value) -> bytes:
    if isinstance(value, str):
        return value.encode("utf-8")
    return bytes(value)


def _freeze_lines(lines: Iterable) -> tuple:
    return tuple((str(name), _as_bytes(value)) for name, value in lines)


@dataclass(frozen=True)
class Message:
    """An HTTP/1.1 request or response.

    Framing headers (Content-Length, Transfer-Encoding) are not part of the
    model: :func:`serialize_message` chooses the framing and
    :func:`parse_message` strips it.
    """

    kind: str
    method: str | None = None
    target: str | None = None
    status: int | None = None
    headers: tuple = ()
    body: bytes = b""
    trailers: tuple = ()

    def __post_init__(self):
        object.__setattr__(self, "headers", _freeze_lines(self.headers))
        object.__setattr__(self, "trailers", _freeze_lines(self.trailers))
        object.__setattr__(self, "body", bytes(self.body))

    @classmethod
    def request(cls, method: str, target: str, headers=(), body: bytes = b"", trailers=()) -> "Message":
        return cls("request", method=method, target=target, headers=headers, body=body, trailers=trailers)

    @classmethod
    def response(cls, status: int, headers=(), body: bytes = b"", trailers=()) -> "Message":
        return cls("response", status=status, headers=headers, body=body, trailers=trailers)

    @property
    def is_request(self) -> bool:
        return self.kind == "request"

    def get(self, name: str, default: bytes | None = None) -> bytes | None:
        key = name.lower()
        for n, v in self.headers:
            if n.lower() == key:
                return v
        for n, v in self.trailers:
            if n.lower() == key:
                return v
        return default

    def get_all(self, name: str) -> list[bytes]:
        key = name.lower()
        return [v for n, v in (*self.headers, *self.trailers) if n.lower() == key]

    def has(self, name: str) -> bool:
        return bool(self.get_all(name))

    def attest_names(self) -> list[str]:
        return [n for n, _ in (*self.headers, *self.trailers) if is_attest(n)]

    def with_header(self, name: str, value) -> "Message":
        return replace(self, headers=self.headers + ((name, _as_bytes(value)),))

    def with_trailer(self, name: str, value) -> "Message":
        return replace(self, trailers=self.trailers + ((name, _as_bytes(value)),))

    def without(self, *names: str) -> "Message":
        drop = {n.lower() for n in names}
        return replace(
            self,
            headers=tuple((n, v) for n, v in self.headers if n.lower() not in drop),
            trailers=tuple((n, v) for n, v in self.trailers if n.lower() not in drop),
        )


# ---------------------------------------------------------------------------
# Attest header lines
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class AttestHeaderLine:
    """One Attest-* field with its structured value."""

    name: str
    value: object = field(compare=True)

    def __post_init__(self):
        if not is_attest(self.name):
            raise ValueError(f"not an Attest-* field: {self.name!r}")
        object.__setattr__(self, "name", canonical_name(self.name))

    @classmethod
    def parse(cls, name: str, raw) -> "AttestHeaderLine":
        kind = FIELD_KINDS.get(canonical_name(name), "list")
        return cls(name, sf.parse_field(raw, kind))

    def serialize_value(self) -> str:
        return sf.serialize_field(self.value)

    def to_header(self) -> tuple[str, bytes]:
        return (self.name, self.serialize_value().encode("ascii"))


def attest_lines(msg: Message, *, exclude: Sequence[str] = (), drop_last_trailer: bool = False) -> list[AttestHeaderLine]:
    """Parse the Attest-* lines of ``msg`` in header-then-trailer order.

    ``exclude`` removes every line with one of the given names;
    ``drop_last_trailer`` removes only the final trailer (ticket or binder).
    Raises :class:`fields.FieldSyntaxError` on a malformed value.
    """
    skip = {n.lower() for n in exclude}
    trailers = list(msg.trailers)
    if drop_last_trailer and trailers:
        trailers = trailers[:-1]
    out = []
    for name, raw in (*msg.headers, *trailers):
        if is_attest(name) and name.lower() not in skip:
            out.append(AttestHeaderLine.parse(name, raw))
    return out


def canonical_transcript(ahls: Sequence[AttestHeaderLine]) -> bytes:
    """lowercase(name) ':' canonical-value LF, for each line in order."""
    out = bytearray()
    for ahl in ahls:
        out += ahl.name.lower().encode("ascii")
        out += b":"
        out += ahl.serialize_value().encode("ascii")
        out += b"\n"
    return bytes(out)


# ---------------------------------------------------------------------------
# Classification
# ---------------------------------------------------------------------------


class RequestClass(str, enum.Enum):
    UtR = "UtR"
    AtR_AtHS = "AtR_AtHS"
    AtR_AtSP = "AtR_AtSP"
    TrR = "TrR"


def classify_request(msg: Message) -> RequestClass:
    if not msg.is_request:
        raise ValueError("only requests can be classified")
    names = {n.lower() for n in msg.attest_names()}
    if msg.method == ATTEST_METHOD:
        if "attest-cipher-suites" in names:
            return RequestClass.AtR_AtHS
        if "attest-base-id" in names:
            return RequestClass.AtR_AtSP
        raise AmbiguousRequest("ATTEST request without Attest-Cipher-Suites or Attest-Base-ID")
    if names:
        return RequestClass.TrR
    return RequestClass.UtR


# ---------------------------------------------------------------------------
# Serialization
# ---------------------------------------------------------------------------


def _check_line(name: str, value: bytes) -> None:
    if not _STR_TOKEN_RE.fullmatch(name):
        raise InvalidMessage(f"invalid field name {name!r}")
    if any(c in value for c in (b"\r", b"\n", b"\x00")):
        raise InvalidMessage(f"control character in value of {name}")
    if value[:1] in (b" ", b"\t") or value[-1:] in (b" ", b"\t"):
        raise InvalidMessage(f"surrounding whitespace in value of {name}")


def validate_message(msg: Message) -> None:
    if msg.kind == "request":
        if not msg.method or msg.status is not None or not msg.target:
            raise InvalidMessage("a request needs method and target and no status")
        if not _STR_TOKEN_RE.fullmatch(msg.method):
            raise InvalidMessage(f"invalid method {msg.method!r}")
        if any(c in msg.target for c in " \r\n\t"):
            raise InvalidMessage("whitespace in request target")
    elif msg.kind == "response":
        if msg.status is None or msg.method is not None or msg.target is not None:
            raise InvalidMessage("a response needs a status and no method/target")
        if not 100 <= msg.status <= 599:
            raise InvalidMessage(f"status out of range: {msg.status}")
    else:
        raise InvalidMessage(f"unknown message kind {msg.kind!r}")
    for name, value in msg.headers:
        _check_line(name, value)
        if name.lower() in FRAMING_HEADERS:
            raise InvalidMessage("framing headers are chosen by the serializer")
    for name, value in msg.trailers:
        _check_line(name, value)
        if name.lower() in FRAMING_HEADERS:
            raise InvalidMessage(f"framing header {name} may not be a trailer")


def _reason(status: int) -> str:
    try:
        return HTTPStatus(status).phrase
    except ValueError:
        return "Unknown"


def serialize_message(msg: Message, framing: str = "auto") -> bytes:
    """Emit HTTP/1.1 bytes.

    ``framing`` is ``auto`` (chunked iff trailers are present),
    ``content-length`` or ``chunked``.
    """
    validate_message(msg)
    if framing not in ("auto", "content-length", "chunked"):
        raise ValueError(f"unknown framing {framing!r}")
    if framing == "content-length" and msg.trailers:
        raise InvalidMessage("trailers need chunked framing")
    chunked = framing == "chunked" or (framing == "auto" and bool(msg.trailers))

    out = bytearray()
    if msg.is_request:
        out += f"{msg.method} {msg.target} HTTP/1.1\r\n".encode("utf-8")
    else:
        out += f"HTTP/1.1 {msg.status} {_reason(msg.status)}\r\n".encode("ascii")
    for name, value in msg.headers:
        out += name.encode("ascii") + b": " + value + b"\r\n"
    if chunked:
        out += b"Transfer-Encoding: chunked\r\n\r\n"
        if msg.body:
            out += f"{len(msg.body):x}\r\n".encode("ascii") + msg.body + b"\r\n"
        out += b"0\r\n"
        for name, value in msg.trailers:
            out += name.encode("ascii") + b": " + value + b"\r\n"
        out += b"\r\n"
    else:
        out += f"Content-Length: {len(msg.body)}\r\n\r\n".encode("ascii")
        out += msg.body
    return bytes(out)


# ---------------------------------------------------------------------------
# Parsing
# ---------------------------------------------------------------------------


class _Limited:
    """Line reader that enforces the header-section cap."""

    def __init__(self, stream: BinaryIO, cap: int):
        self.stream = stream
        self.remaining = cap

    def line(self) -> bytes:
        raw = self.stream.readline(self.remaining + 1)
        if len(raw) > self.remaining:
            raise OversizeMessage("header section exceeds cap")
        self.remaining -= len(raw)
        if not raw:
            raise MalformedMessage("unexpected end of message")
        if not raw.endswith(b"\r\n"):
            raise MalformedMessage("line not terminated by CRLF")
        return raw[:-2]


def _parse_field_line(line: bytes) -> tuple[str, bytes]:
    if line[:1] in (b" ", b"\t"):
        raise MalformedMessage("obsolete line folding")
    name, sep, value = line.partition(b":")
    if not sep:
        raise MalformedMessage(f"header line without colon: {line[:40]!r}")
    if not _TOKEN_RE.fullmatch(name):
        raise MalformedMessage(f"invalid field name {name[:40]!r}")
    return name.decode("ascii"), value.strip(b" \t")


def _read_exact(stream: BinaryIO, n: int) -> bytes:
    data = stream.read(n)
    if data is None or len(data) != n:
        raise MalformedMessage("truncated body")
    return data


def read_message(stream: BinaryIO, *, max_header: int = MAX_HEADER_SECTION, max_body: int = MAX_BODY) -> Message:
    """Read exactly one HTTP/1.1 message from a buffered binary stream."""
    reader = _Limited(stream, max_header)
    start = reader.line()
    parts = start.split(b" ", 2)
    if len(parts) != 3:
        raise MalformedMessage(f"bad start line: {start[:80]!r}")
    if parts[0].startswith(b"HTTP/"):
        if parts[0] != b"HTTP/1.1" or not re.fullmatch(rb"[1-5][0-9][0-9]", parts[1]):
            raise MalformedMessage(f"bad status line: {start[:80]!r}")
        head = {"kind": "response", "status": int(parts[1])}
    else:
        method, target, version = parts
        if version != b"HTTP/1.1" or not _TOKEN_RE.fullmatch(method) or not target or b" " in target:
            raise MalformedMessage(f"bad request line: {start[:80]!r}")
        try:
            target_text = target.decode("utf-8")
        except UnicodeDecodeError:
            raise MalformedMessage("request target is not UTF-8") from None
        head = {"kind": "request", "method": method.decode("ascii"), "target": target_text}

    headers = []
    length = None
    chunked = False
    while True:
        line = reader.line()
        if not line:
            break
        name, value = _parse_field_line(line)
        lname = name.lower()
        if lname == "content-length":
            if length is not None or not value.isdigit():
                raise MalformedMessage("bad Content-Length")
            length = int(value)
        elif lname == "transfer-encoding":
            if value.lower() != b"chunked" or chunked:
                raise MalformedMessage(f"unsupported transfer-encoding {value!r}")
            chunked = True
        else:
            headers.append((name, value))
    if chunked and length is not None:
        raise MalformedMessage("both Content-Length and chunked framing")

    trailers = []
    if chunked:
        body = bytearray()
        while True:
            size_line = stream.readline(1024)
            if not size_line.endswith(b"\r\n"):
                raise MalformedMessage("bad chunk size line")
            size_text = size_line[:-2].split(b";", 1)[0].strip()
            if not _CHUNK_SIZE_RE.fullmatch(size_text):
                raise MalformedMessage(f"bad chunk size {size_text[:20]!r}")
            size = int(size_text, 16)
            if size == 0:
                break
            if len(body) + size > max_body:
                raise OversizeMessage("body exceeds cap")
            body += _read_exact(stream, size)
            if _read_exact(stream, 2) != b"\r\n":
                raise MalformedMessage("chunk data not terminated by CRLF")
        trailer_reader = _Limited(stream, max_header)
        while True:
            line = trailer_reader.line()
            if not line:
                break
            name, value = _parse_field_line(line)
            if name.lower() in FRAMING_HEADERS:
                raise MalformedMessage(f"framing field {name} in trailer section")
            trailers.append((name, value))
        body = bytes(body)
    elif length is not None:
        if length > max_body:
            raise OversizeMessage("body exceeds cap")
        body = _read_exact(stream, length)
    else:
        body = b""
    return Message(headers=tuple(headers), body=body, trailers=tuple(trailers), **head)


def parse_message(data: bytes, *, max_header: int = MAX_HEADER_SECTION, max_body: int = MAX_BODY) -> Message:
    stream = io.BytesIO(data)
    msg = read_message(stream, max_header=max_header, max_body=max_body)
    if stream.read(1):
        raise MalformedMessage("trailing bytes after message")
    return msg
