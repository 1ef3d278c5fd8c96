"""An L7 intermediary that parses, optionally tampers with, and re-emits HTTP."""

from __future__ import annotations

import threading
import time
from dataclasses import dataclass, field, replace
from typing import Callable, Sequence

from . import fields as sf
from .errors import AmbiguousRequest, HttpaError, MalformedMessage
from .wire import AttestHeaderLine, Message, classify_request, is_attest, parse_message, serialize_message

Transport = Callable[[bytes], bytes]

ACTIONS = ("drop", "modify", "duplicate", "reorder", "replay-previous", "insert", "flip-body")


@dataclass
class TamperRule:
    """One scripted manipulation.

    ``field`` names a header or trailer (``section`` narrows it); ``element``
    selects a list member for ``drop`` and ``modify``. ``nth`` counts matching
    messages from 1; 0 applies the rule to every match.
    """

    action: str
    direction: str = "request"
    request_class: str | None = None
    field: str | None = None
    section: str = "any"
    element: int | None = None
    value: str | None = None
    offset: int = 0
    nth: int = 1
    seen: int = 0

    def __post_init__(self):
        if self.action not in ACTIONS:
            raise ValueError(f"unknown tamper action {self.action!r}")
        if self.direction not in ("request", "response"):
            raise ValueError(f"unknown direction {self.direction!r}")
        if self.section not in ("any", "header", "trailer"):
            raise ValueError(f"unknown section {self.section!r}")

    @classmethod
    def from_dict(cls, d: dict) -> "TamperRule":
        d = dict(d)
        d.pop("hop", None)
        if "class" in d:
            d["request_class"] = d.pop("class")
        return cls(**d)

    def matches(self, direction: str, request_class: str | None) -> bool:
        if direction != self.direction:
            return False
        if self.request_class is not None and self.request_class != request_class:
            return False
        self.seen += 1
        return self.nth == 0 or self.seen == self.nth


@dataclass
class CaptureEntry:
    direction: str
    raw: bytes
    message: Message | None
    timestamp: float
    forwarded: bytes


class CaptureLog:
    """Append-only record of everything a middlebox saw and sent on."""

    def __init__(self):
        self._entries: list[CaptureEntry] = []
        self._lock = threading.Lock()

    def append(self, entry: CaptureEntry) -> None:
        with self._lock:
            self._entries.append(entry)

    @property
    def entries(self) -> tuple:
        return tuple(self._entries)

    def all_bytes(self) -> list[bytes]:
        out = []
        for e in self._entries:
            out.extend((e.raw, e.forwarded))
        return out

    def __len__(self) -> int:
        return len(self._entries)


# ---------------------------------------------------------------------------
# Mutations
# ---------------------------------------------------------------------------


def _mutate_item(item: sf.Item) -> sf.Item:
    v = item.value
    if isinstance(v, bytes):
        nv = bytes([v[0] ^ 0x01]) + v[1:] if v else b"\x00"
    elif isinstance(v, bool):
        nv = not v
    elif isinstance(v, int):
        nv = v + 1
    elif isinstance(v, sf.Token):
        nv = sf.Token(v + "x")
    else:
        nv = v + "x"
    return sf.Item(nv, item.params)


def mutate_value(name: str, raw: bytes, element: int | None = None) -> bytes:
    """Semantic single change: flip a bit, bump a number or alter a token."""
    if not is_attest(name):
        return raw + b"x"
    try:
        ahl = AttestHeaderLine.parse(name, raw)
    except sf.FieldSyntaxError:
        return raw + b"x"
    value = ahl.value
    if isinstance(value, sf.Item):
        value = _mutate_item(value)
    elif isinstance(value, list):
        value = list(value)
        i = element or 0
        if value:
            value[i] = _mutate_item(value[i])
    else:
        value = dict(value)
        key = next(iter(value))
        value[key] = _mutate_item(value[key])
    return AttestHeaderLine(name, value).to_header()[1]


def _drop_element(name: str, raw: bytes, element: int) -> bytes:
    ahl = AttestHeaderLine.parse(name, raw)
    items = list(ahl.value)
    del items[element]
    return AttestHeaderLine(name, items).to_header()[1]


def _sections(msg: Message, section: str) -> list[str]:
    return ["headers", "trailers"] if section == "any" else [section + "s"]


def apply_rule(rule: TamperRule, msg: Message, previous: Message | None = None) -> Message:
    if rule.action == "replay-previous":
        return previous if previous is not None else msg
    if rule.action == "insert":
        name = rule.field or "Attest-Foo"
        value = rule.value if rule.value is not None else "bar"
        if rule.section == "trailer":
            return msg.with_trailer(name, value)
        headers = list(msg.headers)
        # Before the first Attest line so it cannot pose as the ticket/binder.
        pos = next((i for i, (n, _) in enumerate(headers) if is_attest(n)), len(headers))
        headers.insert(pos, (name, value.encode()))
        return replace(msg, headers=tuple(headers))
    if rule.action == "flip-body":
        if not msg.body:
            return msg
        body = bytearray(msg.body)
        body[rule.offset % len(body)] ^= 0x01
        return replace(msg, body=bytes(body))

    key = (rule.field or "").lower()
    for sec in _sections(msg, rule.section):
        lines = list(getattr(msg, sec))
        idx = next((i for i, (n, _) in enumerate(lines) if n.lower() == key), None)
        if idx is None:
            continue
        name, raw = lines[idx]
        if rule.action == "drop":
            if rule.element is None:
                del lines[idx]
            else:
                lines[idx] = (name, _drop_element(name, raw, rule.element))
        elif rule.action == "modify":
            lines[idx] = (name, rule.value.encode() if rule.value is not None else mutate_value(name, raw, rule.element))
        elif rule.action == "duplicate":
            lines.insert(idx + 1, (name, raw))
        elif rule.action == "reorder":
            attest_idx = [i for i, (n, _) in enumerate(lines) if is_attest(n)] if is_attest(name) else list(range(len(lines)))
            pos = attest_idx.index(idx)
            other = attest_idx[pos + 1] if pos + 1 < len(attest_idx) else (attest_idx[pos - 1] if pos else None)
            if other is None:
                return msg
            lines[idx], lines[other] = lines[other], lines[idx]
        return replace(msg, **{sec: tuple(lines)})
    return msg


# ---------------------------------------------------------------------------
# Forwarding
# ---------------------------------------------------------------------------


def _bad_gateway() -> bytes:
    return serialize_message(Message.response(502, body=b"Bad Gateway\n"))


class Middlebox:
    """Callable transport hop: ``mb(request_bytes) -> response_bytes``."""

    def __init__(self, upstream: Transport, rules: Sequence[TamperRule] = (), log: CaptureLog | None = None, clock=time.time):
        self.upstream = upstream
        self.rules = list(rules)
        self.log = log if log is not None else CaptureLog()
        self.clock = clock
        self._previous: dict[tuple, Message] = {}
        self._lock = threading.Lock()

    def _process(self, direction: str, raw: bytes, cls: str | None) -> tuple[bytes, Message | None]:
        try:
            msg = parse_message(raw)
        except MalformedMessage:
            self.log.append(CaptureEntry(direction, raw, None, self.clock(), b""))
            raise
        out = msg
        for rule in self.rules:
            if rule.matches(direction, cls):
                out = apply_rule(rule, out, self._previous.get((direction, cls)))
        self._previous[(direction, cls)] = msg
        forwarded = serialize_message(out)
        self.log.append(CaptureEntry(direction, raw, msg, self.clock(), forwarded))
        return forwarded, msg

    def __call__(self, data: bytes) -> bytes:
        with self._lock:
            try:
                req = parse_message(data)
                try:
                    cls = classify_request(req).value
                except (AmbiguousRequest, ValueError):
                    cls = None
                forwarded, _ = self._process("request", data, cls)
            except MalformedMessage:
                return _bad_gateway()
            try:
                resp_raw = self.upstream(forwarded)
            except HttpaError:
                return _bad_gateway()
            try:
                out, _ = self._process("response", resp_raw, cls)
            except MalformedMessage:
                return _bad_gateway()
            return out


def chain(n: int, upstream: Transport, rules_per_hop: Sequence[Sequence[TamperRule]] = (), logs: list | None = None) -> tuple[Transport, list]:
    """client -> mb1 -> ... -> mbn -> upstream; returns the entry hop and all hops."""
    if n < 1:
        raise ValueError("a chain needs at least one hop")
    hops = []
    nxt = upstream
    for i in reversed(range(n)):
        rules = rules_per_hop[i] if i < len(rules_per_hop) else ()
        log = logs[i] if logs is not None and i < len(logs) else None
        mb = Middlebox(nxt, rules, log)
        hops.insert(0, mb)
        nxt = mb
    return hops[0], hops
