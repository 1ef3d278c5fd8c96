"""Restricted structured-field codec for Attest-* header values.

The profile is a small subset of structured HTTP field values:

* bare items: integers, booleans (``?1``/``?0``), tokens, quoted strings and
  byte sequences (base64url without padding, wrapped in colons);
* parameters attached to items as ``;key=value`` (a bare key means ``?1``);
* lists (comma separated items) and dictionaries (``key=item`` members).

Inner lists are not part of the profile.  Dictionary keys and parameter keys
may use mixed case so that names such as ``allowUntrustedReq`` survive.
"""

from __future__ import annotations

import base64
import binascii
import re
from dataclasses import dataclass, field
from typing import Mapping, Union

__all__ = [
    "FieldSyntaxError",
    "Token",
    "Item",
    "BareItem",
    "FieldValue",
    "b64url_encode",
    "b64url_decode",
    "parse_item",
    "parse_list",
    "parse_dict",
    "parse_field",
    "serialize_item",
    "serialize_list",
    "serialize_dict",
    "serialize_field",
]


class FieldSyntaxError(ValueError):
    """Raised when a header value does not match the structured profile."""


class Token(str):
    """A token bare item, kept distinct from quoted strings."""

    __slots__ = ()

    def __repr__(self) -> str:
        return f"Token({str.__repr__(self)})"


BareItem = Union[int, bool, str, Token, bytes]


@dataclass(frozen=True)
class Item:
    value: BareItem
    params: Mapping[str, BareItem] = field(default_factory=dict)

    def param(self, key: str, default=None):
        return self.params.get(key, default)


FieldValue = Union[Item, "list[Item]", "dict[str, Item]"]

_TOKEN_RE = re.compile(r"[A-Za-z*][A-Za-z0-9!#$%&'*+\-.^_`|~:/]*")
_KEY_RE = re.compile(r"[A-Za-z*][A-Za-z0-9_\-.*]*")
_INT_RE = re.compile(r"-?[0-9]{1,15}")
_B64URL_RE = re.compile(r"[A-Za-z0-9_-]*")


def b64url_encode(data: bytes) -> str:
    return base64.urlsafe_b64encode(data).rstrip(b"=").decode("ascii")


def b64url_decode(text: str) -> bytes:
    if not _B64URL_RE.fullmatch(text) or len(text) % 4 == 1:
        raise FieldSyntaxError(f"invalid base64url text: {text!r}")
    padded = text + "=" * (-len(text) % 4)
    try:
        raw = base64.urlsafe_b64decode(padded)
    except (binascii.Error, ValueError) as exc:
        raise FieldSyntaxError(str(exc)) from None
    # Reject non-canonical encodings (stray low bits in the final symbol).
    if b64url_encode(raw) != text:
        raise FieldSyntaxError(f"non-canonical base64url text: {text!r}")
    return raw


# ---------------------------------------------------------------------------
# Serialization
# ---------------------------------------------------------------------------


def _serialize_bare(value: BareItem) -> str:
    if isinstance(value, bool):
        return "?1" if value else "?0"
    if isinstance(value, int):
        if abs(value) > 999_999_999_999_999:
            raise FieldSyntaxError(f"integer out of range: {value}")
        return str(value)
    if isinstance(value, Token):
        if not _TOKEN_RE.fullmatch(value):
            raise FieldSyntaxError(f"invalid token: {value!r}")
        return str(value)
    if isinstance(value, str):
        if any(ord(c) < 0x20 or ord(c) > 0x7E for c in value):
            raise FieldSyntaxError("strings must be printable ASCII")
        return '"' + value.replace("\\", "\\\\").replace('"', '\\"') + '"'
    if isinstance(value, (bytes, bytearray)):
        return ":" + b64url_encode(bytes(value)) + ":"
    raise FieldSyntaxError(f"unsupported bare item type: {type(value).__name__}")


def _serialize_params(params: Mapping[str, BareItem]) -> str:
    out = []
    for key, value in params.items():
        if not _KEY_RE.fullmatch(key):
            raise FieldSyntaxError(f"invalid parameter key: {key!r}")
        if value is True:
            out.append(f";{key}")
        else:
            out.append(f";{key}={_serialize_bare(value)}")
    return "".join(out)


def serialize_item(item: Item) -> str:
    return _serialize_bare(item.value) + _serialize_params(item.params)


def serialize_list(items) -> str:
    return ", ".join(serialize_item(_as_item(i)) for i in items)


def serialize_dict(members: Mapping[str, Item]) -> str:
    out = []
    for key, member in members.items():
        if not _KEY_RE.fullmatch(key):
            raise FieldSyntaxError(f"invalid dictionary key: {key!r}")
        member = _as_item(member)
        if member.value is True:
            out.append(key + _serialize_params(member.params))
        else:
            out.append(f"{key}={serialize_item(member)}")
    return ", ".join(out)


def serialize_field(value) -> str:
    if isinstance(value, Item):
        return serialize_item(value)
    if isinstance(value, (list, tuple)):
        return serialize_list(value)
    if isinstance(value, Mapping):
        return serialize_dict(value)
    return serialize_item(Item(value))


def _as_item(value) -> Item:
    return value if isinstance(value, Item) else Item(value)


# ---------------------------------------------------------------------------
# Parsing
# ---------------------------------------------------------------------------


class _Cursor:
    def __init__(self, text: str):
        self.text = text
        self.pos = 0

    def peek(self) -> str:
        return self.text[self.pos] if self.pos < len(self.text) else ""

    def eof(self) -> bool:
        return self.pos >= len(self.text)

    def skip_sp(self) -> None:
        while self.peek() == " ":
            self.pos += 1

    def skip_ows(self) -> None:
        while self.peek() in (" ", "\t") and self.peek():
            self.pos += 1

    def match(self, pattern: re.Pattern) -> str:
        m = pattern.match(self.text, self.pos)
        if not m or not m.group(0):
            raise FieldSyntaxError(f"unexpected input at {self.pos}: {self.text!r}")
        self.pos = m.end()
        return m.group(0)

    def expect(self, ch: str) -> None:
        if self.peek() != ch:
            raise FieldSyntaxError(f"expected {ch!r} at {self.pos}: {self.text!r}")
        self.pos += 1


def _parse_bare(cur: _Cursor) -> BareItem:
    ch = cur.peek()
    if ch == "-" or ch.isdigit():
        text = cur.match(_INT_RE)
        if cur.peek() == ".":
            raise FieldSyntaxError("decimals are not part of the profile")
        return int(text)
    if ch == '"':
        cur.pos += 1
        chars = []
        while True:
            if cur.eof():
                raise FieldSyntaxError("unterminated string")
            c = cur.text[cur.pos]
            cur.pos += 1
            if c == "\\":
                if cur.peek() not in ('"', "\\"):
                    raise FieldSyntaxError("bad escape in string")
                chars.append(cur.peek())
                cur.pos += 1
            elif c == '"':
                return "".join(chars)
            elif ord(c) < 0x20 or ord(c) > 0x7E:
                raise FieldSyntaxError("non-printable character in string")
            else:
                chars.append(c)
    if ch == ":":
        cur.pos += 1
        end = cur.text.find(":", cur.pos)
        if end < 0:
            raise FieldSyntaxError("unterminated byte sequence")
        raw = b64url_decode(cur.text[cur.pos:end])
        cur.pos = end + 1
        return raw
    if ch == "?":
        cur.pos += 1
        flag = cur.peek()
        if flag not in ("0", "1"):
            raise FieldSyntaxError("bad boolean")
        cur.pos += 1
        return flag == "1"
    if ch.isalpha() or ch == "*":
        return Token(cur.match(_TOKEN_RE))
    raise FieldSyntaxError(f"unexpected character {ch!r} in {cur.text!r}")


def _parse_params(cur: _Cursor) -> dict:
    params: dict = {}
    while cur.peek() == ";":
        cur.pos += 1
        cur.skip_sp()
        key = cur.match(_KEY_RE)
        value: BareItem = True
        if cur.peek() == "=":
            cur.pos += 1
            value = _parse_bare(cur)
        params[key] = value
    return params


def _parse_item(cur: _Cursor) -> Item:
    value = _parse_bare(cur)
    return Item(value, _parse_params(cur))


def _prepare(text) -> _Cursor:
    if isinstance(text, (bytes, bytearray)):
        try:
            text = bytes(text).decode("ascii")
        except UnicodeDecodeError:
            raise FieldSyntaxError("field values must be ASCII") from None
    cur = _Cursor(text.strip(" \t"))
    return cur


def parse_item(text) -> Item:
    cur = _prepare(text)
    item = _parse_item(cur)
    if not cur.eof():
        raise FieldSyntaxError(f"trailing characters in item: {cur.text!r}")
    return item


def parse_list(text) -> list:
    cur = _prepare(text)
    items: list = []
    while not cur.eof():
        items.append(_parse_item(cur))
        cur.skip_ows()
        if cur.eof():
            break
        cur.expect(",")
        cur.skip_ows()
        if cur.eof():
            raise FieldSyntaxError("trailing comma in list")
    return items


def parse_dict(text) -> dict:
    cur = _prepare(text)
    members: dict = {}
    while not cur.eof():
        key = cur.match(_KEY_RE)
        if cur.peek() == "=":
            cur.pos += 1
            member = _parse_item(cur)
        else:
            member = Item(True, _parse_params(cur))
        if key in members:
            raise FieldSyntaxError(f"duplicate dictionary key {key!r}")
        members[key] = member
        cur.skip_ows()
        if cur.eof():
            break
        cur.expect(",")
        cur.skip_ows()
        if cur.eof():
            raise FieldSyntaxError("trailing comma in dictionary")
    return members


_PARSERS = {"item": parse_item, "list": parse_list, "dict": parse_dict}


def parse_field(text, kind: str):
    try:
        parser = _PARSERS[kind]
    except KeyError:
        raise ValueError(f"unknown field kind {kind!r}") from None
    return parser(text)
