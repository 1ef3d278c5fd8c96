"""Reference endpoints: the TService dispatcher and the scripted client."""

from __future__ import annotations

import logging
import os
import socket
import socketserver
import threading
import time
from dataclasses import dataclass, field
from email.utils import formatdate
from typing import Callable, Sequence

from . import fields as sf
from .attest import AppraisalPolicy, QService, Verifier
from .config import ClientConfig, ServiceConfig
from .crypto import NonceTracker, RandomSource
from .errors import (
    AmbiguousRequest,
    AuthenticationFailure,
    HttpaError,
    MalformedMessage,
    PreflightRejected,
    ProtocolReject,
    RegionOutOfBounds,
    SessionInactive,
    UpstreamUnreachable,
)
from .handshake import AttestBase, Registry, client_begin, client_finish, service_handle_aths
from .session import (
    AppHandler,
    AppRequest,
    AppResponse,
    Region,
    Session,
    handle_atsp,
    handle_trr,
    open_cargo,
    protect_request,
    validate_binder,
)
from .wire import (
    ATTEST_METHOD,
    FIELD_KINDS,
    AttestHeaderLine,
    Message,
    RequestClass,
    classify_request,
    parse_message,
    read_message,
    serialize_message,
)

log = logging.getLogger(__name__)

Transport = Callable[[bytes], bytes]
Clock = Callable[[], float]

GENERIC_404_BODY = b"Not Found\n"

# Fields a client may put on an attest request; preflight advertises these.
REQUEST_FIELDS = (
    "Attest-Versions",
    "Attest-Cipher-Suites",
    "Attest-Supported-Groups",
    "Attest-Key-Shares",
    "Attest-Random",
    "Attest-Policies",
    "Attest-Base-Creation",
    "Attest-Blocklist",
    "Attest-Date",
    "Attest-Transport",
    "Attest-Quotes",
    "Attest-Signatures",
    "Attest-Base-ID",
    "Attest-Secrets",
    "Attest-Cargo",
    "Attest-Ticket",
    "Attest-Base-Termination",
)
assert all(name in FIELD_KINDS for name in REQUEST_FIELDS)


def http_date(ts: float) -> str:
    return formatdate(ts, usegmt=True)


def echo_app(req: AppRequest) -> AppResponse:
    """Default application: echoes the body and protects the same regions."""
    headers = [("Content-Type", "application/octet-stream")]
    for name, value in req.headers:
        if name.lower() == "x-note":
            headers.append(("X-Echo-Note", value))
    return AppResponse(200, tuple(headers), req.body, list(req.regions))


# ---------------------------------------------------------------------------
# Service
# ---------------------------------------------------------------------------


@dataclass
class ServiceEvent:
    kind: str
    accepted: bool
    reason: str | None = None
    status: int = 200
    base_id: str | None = None


class TService:
    def __init__(
        self,
        cfg: ServiceConfig | None = None,
        qservice: QService | None = None,
        *,
        registry: Registry | None = None,
        app: AppHandler = echo_app,
        client_verifier: Verifier | None = None,
        rng: RandomSource = os.urandom,
        clock: Clock = time.time,
        tracker: NonceTracker | None = None,
    ):
        self.cfg = cfg or ServiceConfig()
        self.rng = rng
        self.qservice = qservice or QService(rng=rng)
        self.registry = registry or Registry(self.cfg.max_instances, rng)
        self.app = app
        self.client_verifier = client_verifier
        self.clock = clock
        self.tracker = tracker
        self.events: list[ServiceEvent] = []
        self.last_plaintext: AppRequest | None = None
        self._lock = threading.Lock()

    def _date(self) -> tuple:
        return (("Date", http_date(self.clock())),)

    def _record(self, kind: str, reason: str | None, status: int, base_id: str | None = None) -> None:
        with self._lock:
            self.events.append(ServiceEvent(kind, reason is None, reason, status, base_id))
        if reason is not None:
            log.info("%s rejected (%s) with %d", kind, reason, status)

    def not_found(self) -> Message:
        return Message.response(404, headers=self._date(), body=GENERIC_404_BODY)

    def handle_preflight(self, req: Message) -> Message:
        requested = req.get("Access-Control-Request-Headers", b"").decode("latin-1")
        wanted = [h.strip() for h in requested.split(",") if h.strip()]
        supported = {n.lower(): n for n in REQUEST_FIELDS}
        allowed = []
        for name in wanted:
            canon = supported.get(name.lower())
            if canon and canon not in allowed:
                allowed.append(canon)
        headers = [
            *self._date(),
            ("Allow", ", ".join(self.cfg.allow_methods)),
            ("Access-Control-Allow-Methods", ", ".join(self.cfg.allow_methods)),
            ("Access-Control-Allow-Headers", ", ".join(allowed)),
            ("Access-Control-Max-Age", str(self.cfg.preflight_max_age)),
        ]
        return Message.response(204, headers=headers)

    def _lookup(self, req: Message) -> AttestBase | None:
        raw = req.get("Attest-Base-ID")
        if raw is None:
            return None
        try:
            item = sf.parse_item(raw)
        except sf.FieldSyntaxError:
            return None
        if not isinstance(item.value, bytes):
            return None
        return self.registry.lookup(sf.b64url_encode(item.value), self.clock())

    def handle(self, req: Message) -> Message:
        if not req.is_request:
            return Message.response(400, headers=self._date(), body=b"Bad Request\n")
        if req.method == "OPTIONS" and not req.attest_names():
            self._record("preflight", None, 204)
            return self.handle_preflight(req)
        try:
            cls = classify_request(req)
        except AmbiguousRequest:
            self._record("ambiguous", "ambiguous-request", 400)
            return Message.response(400, headers=self._date(), body=b"Bad Request\n")

        if cls is RequestClass.AtR_AtHS:
            out = service_handle_aths(
                req,
                self.registry,
                self.cfg,
                self.qservice,
                client_verifier=self.client_verifier,
                rng=self.rng,
                clock=self.clock,
                date_header=self._date(),
                tracker=self.tracker,
            )
            self._record("aths", out.reason, out.response.status, out.base.base_id if out.base else None)
            return out.response

        if cls is RequestClass.UtR:
            if not self.cfg.allow_untrusted:
                self._record("utr", "untrusted-disabled", 404)
                return self.not_found()
            result = self.app(AppRequest(req.method, req.target, req.headers, req.body, []))
            self._record("utr", None, result.status)
            return Message.response(result.status, headers=self._date() + tuple(result.headers), body=result.body)

        kind = "atsp" if cls is RequestClass.AtR_AtSP else "trr"
        base = self._lookup(req)
        if base is None:
            self._record(kind, "unknown-base", 404)
            return self.not_found()
        with base.lock:
            if not base.live:
                self._record(kind, "unknown-base", 404)
                return self.not_found()
            strict = bool(base.policies.get("strictReplay", False))
            if cls is RequestClass.AtR_AtSP:
                handled = handle_atsp(base, req, self.registry, strict=strict, date_header=self._date(), tracker=self.tracker)
            else:
                handled = handle_trr(
                    base,
                    req,
                    self.registry,
                    self.app,
                    strict=strict,
                    pad_block=self.cfg.padding_block,
                    date_header=self._date(),
                    tracker=self.tracker,
                )
                if handled.plaintext is not None:
                    self.last_plaintext = handled.plaintext
        self._record(kind, handled.reason, handled.response.status, base.base_id)
        return handled.response

    def handle_bytes(self, data: bytes) -> bytes:
        try:
            req = parse_message(data)
        except MalformedMessage:
            self._record("malformed", "malformed-message", 400)
            return serialize_message(Message.response(400, headers=self._date(), body=b"Bad Request\n"))
        return serialize_message(self.handle(req))

    __call__ = handle_bytes


# ---------------------------------------------------------------------------
# TCP plumbing
# ---------------------------------------------------------------------------


class _Handler(socketserver.StreamRequestHandler):
    def handle(self):
        try:
            req = read_message(self.rfile)
        except MalformedMessage:
            resp = Message.response(400, body=b"Bad Request\n")
            self.wfile.write(serialize_message(resp))
            return
        except (ConnectionError, EOFError):
            return
        self.wfile.write(self.server.respond(serialize_message(req)))


class _Server(socketserver.ThreadingTCPServer):
    daemon_threads = True
    allow_reuse_address = True

    def __init__(self, addr, respond: Transport):
        self.respond = respond
        super().__init__(addr, _Handler)


def serve_tcp(respond: Transport, host: str = "127.0.0.1", port: int = 0) -> _Server:
    """Start a threaded TCP server in the background; port 0 picks a free one."""
    server = _Server((host, port), respond)
    threading.Thread(target=server.serve_forever, daemon=True).start()
    return server


class TcpTransport:
    """One connection per message, matching the single-transaction codec."""

    def __init__(self, host: str, port: int, timeout: float = 10.0):
        self.host, self.port, self.timeout = host, port, timeout

    def __call__(self, data: bytes) -> bytes:
        try:
            with socket.create_connection((self.host, self.port), timeout=self.timeout) as sock:
                sock.sendall(data)
                with sock.makefile("rb") as stream:
                    return serialize_message(read_message(stream))
        except OSError as exc:
            raise UpstreamUnreachable(f"{self.host}:{self.port}: {exc}") from exc


# ---------------------------------------------------------------------------
# Client
# ---------------------------------------------------------------------------


@dataclass
class PreflightResult:
    allow_methods: frozenset
    allow_headers: frozenset
    max_age: int
    fetched_at: float

    def usable(self, now: float) -> bool:
        return now < self.fetched_at + self.max_age


@dataclass
class StepRecord:
    index: int
    op: str
    verdict: str
    reason: str | None = None
    status: int | None = None
    exchanges: int = 0
    data: dict = field(default_factory=dict)

    def as_dict(self) -> dict:
        return {
            "index": self.index,
            "op": self.op,
            "verdict": self.verdict,
            "reason": self.reason,
            "status": self.status,
            "exchanges": self.exchanges,
            **self.data,
        }


@dataclass
class TranscriptLog:
    steps: list = field(default_factory=list)
    messages: list = field(default_factory=list)

    def verdicts(self) -> list[tuple]:
        return [(s.op, s.verdict, s.reason) for s in self.steps]

    def as_dict(self) -> dict:
        return {"steps": [s.as_dict() for s in self.steps]}


class ClientAbort(ProtocolReject):
    """A client-side security check failed; the session is abandoned."""


class Refused(ProtocolReject):
    """The service declined the request; carries its status."""

    reason = "refused"

    def __init__(self, status: int):
        super().__init__(detail=f"status {status}")
        self.status = status


# Service statuses that refuse a protected request without a binder.
_REFUSALS = (400, 403, 404, 503)


class Client:
    def __init__(
        self,
        cfg: ClientConfig,
        transport: Transport,
        verifier: Verifier,
        *,
        policy: AppraisalPolicy | None = None,
        rng: RandomSource = os.urandom,
        clock: Clock = time.time,
        qservice: QService | None = None,
        tracker: NonceTracker | None = None,
    ):
        self.cfg = cfg
        self.transport = transport
        self.verifier = verifier
        self.policy = policy or cfg.policy
        self.rng = rng
        self.clock = clock
        self.qservice = qservice
        self.tracker = tracker
        self.preflight_cache: dict[str, PreflightResult] = {}
        self.session: Session | None = None
        self.log = TranscriptLog()
        self.exchanges = 0
        self.aborted: str | None = None

    # -- plumbing ---------------------------------------------------------

    def send(self, msg: Message) -> Message:
        data = serialize_message(msg)
        self.exchanges += 1
        raw = self.transport(data)
        self.log.messages.append(("request", data))
        self.log.messages.append(("response", raw))
        try:
            return parse_message(raw)
        except MalformedMessage:
            raise ClientAbort("malformed-response") from None

    def _abort(self, reason: str) -> ClientAbort:
        self.aborted = reason
        if self.session is not None:
            self.session.active = False
        return ClientAbort(reason)

    def _base_header(self) -> tuple[str, bytes]:
        if self.session is None or not self.session.active:
            raise SessionInactive("no active session")
        return AttestHeaderLine("Attest-Base-ID", sf.Item(sf.b64url_decode(self.session.base_id))).to_header()

    # -- protocol steps ---------------------------------------------------

    def preflight(self) -> PreflightResult:
        cached = self.preflight_cache.get(self.cfg.target)
        if cached is not None and cached.usable(self.clock()):
            return cached
        req = Message.request(
            "OPTIONS",
            self.cfg.target,
            headers=[
                ("Host", self.cfg.host),
                ("Access-Control-Request-Method", ATTEST_METHOD),
                ("Access-Control-Request-Headers", ", ".join(self.cfg.preflight_headers)),
            ],
        )
        resp = self.send(req)
        methods = frozenset(m.strip() for m in resp.get("Allow", b"").decode("latin-1").split(",") if m.strip())
        headers = frozenset(
            h.strip().lower() for h in resp.get("Access-Control-Allow-Headers", b"").decode("latin-1").split(",") if h.strip()
        )
        if ATTEST_METHOD not in methods:
            raise self._abort("preflight-rejected")
        missing = [h for h in self.cfg.preflight_headers if h.lower() not in headers]
        if missing:
            raise self._abort("preflight-rejected")
        try:
            max_age = int(resp.get("Access-Control-Max-Age", b"0"))
        except ValueError:
            max_age = 0
        result = PreflightResult(methods, headers, max_age, self.clock())
        self.preflight_cache[self.cfg.target] = result
        return result

    def handshake(self) -> Session:
        req, state = client_begin(self.cfg, rng=self.rng, clock=self.clock, client_qservice=self.qservice)
        resp = self.send(req)
        if resp.status != 200:
            raise Refused(resp.status)
        try:
            self.session = client_finish(state, resp, self.verifier, self.policy, tracker=self.tracker)
        except ProtocolReject as exc:
            raise self._abort(exc.reason) from None
        self.aborted = None
        return self.session

    def _exchange(self, req: Message, regions=(), secrets=(), corrupt_secret=None) -> tuple[Message, bytes, list]:
        req, ticket = protect_request(self.session, req, regions, secrets, corrupt_secret)
        resp = self.send(req)
        if resp.status in _REFUSALS and not resp.trailers:
            raise Refused(resp.status)
        verdict = validate_binder(self.session.keys, resp, ticket)
        if not verdict:
            raise self._abort(verdict.reason)
        body, out_regions = resp.body, []
        if resp.has("Attest-Cargo"):
            try:
                body, out_regions = open_cargo(
                    self.session.keys, "service", ticket.seq, resp.body, resp.get("Attest-Cargo"), self.session.secrets
                )
            except (AuthenticationFailure, RegionOutOfBounds, KeyError, TypeError, ValueError):
                raise self._abort("bad-cargo") from None
        return resp, body, out_regions

    def provision(self, secrets: Sequence[bytes], corrupt_secret: int | None = None) -> Message:
        req = Message.request(ATTEST_METHOD, self.cfg.target, headers=[("Host", self.cfg.host), self._base_header()])
        resp, _, _ = self._exchange(req, secrets=secrets, corrupt_secret=corrupt_secret)
        self.session.secrets.extend(secrets)
        return resp

    def request(
        self,
        method: str = "POST",
        target: str | None = None,
        body: bytes = b"",
        regions: Sequence[Region] = (),
        headers: Sequence = (),
        terminate: str | None = None,
    ) -> tuple[Message, bytes, list]:
        hdrs = [("Host", self.cfg.host), *headers, self._base_header()]
        if terminate is not None:
            hdrs.append(("Attest-Base-Termination", terminate))
        req = Message.request(method, target or self.cfg.target, headers=hdrs, body=body)
        out = self._exchange(req, regions=regions)
        if terminate is not None:
            self.session.active = False
        return out

    def untrusted(self, method: str = "GET", target: str | None = None, body: bytes = b"") -> Message:
        return self.send(Message.request(method, target or self.cfg.target, headers=[("Host", self.cfg.host)], body=body))

    # -- scripted runs ----------------------------------------------------

    def run_step(self, index: int, step: dict) -> StepRecord:
        op = step["op"]
        before = self.exchanges
        rec = StepRecord(index, op, "accept")
        if self.aborted is not None and op != "utr":
            rec.verdict, rec.reason = "skipped", self.aborted
            self.log.steps.append(rec)
            return rec
        try:
            if op == "preflight":
                self.preflight()
            elif op == "handshake":
                session = self.handshake()
                rec.data["suite"] = session.suite.id
                rec.data["base_id"] = session.base_id
            elif op == "provision":
                secrets = [s.encode() if isinstance(s, str) else s for s in step.get("secrets", [])]
                resp = self.provision(secrets, step.get("corrupt"))
                rec.status = resp.status
            elif op == "trr":
                body = step.get("body", "")
                body = body.encode() if isinstance(body, str) else body
                regions = [Region(r["off"], r["len"], r.get("ki", -1), r.get("kind", "encrypted")) for r in step.get("regions", [])]
                resp, plain, _ = self.request(
                    step.get("method", "POST"),
                    step.get("target"),
                    body,
                    regions,
                    [tuple(h) for h in step.get("headers", [])],
                    step.get("terminate"),
                )
                rec.status = resp.status
                rec.data["body"] = plain.decode("utf-8", "replace")
                rec.data["headers"] = {n: v.decode("latin-1") for n, v in resp.headers if n.lower() != "date"}
            elif op == "utr":
                resp = self.untrusted(step.get("method", "GET"), step.get("target"))
                rec.status = resp.status
                if resp.status >= 400:
                    rec.verdict, rec.reason = "reject", "refused"
            else:
                raise ValueError(f"unknown client op {op!r}")
        except ClientAbort as exc:
            rec.verdict, rec.reason = "reject", exc.reason
        except ProtocolReject as exc:
            rec.verdict, rec.reason = "reject", exc.reason
            rec.status = getattr(exc, "status", None)
            if op in ("handshake", "preflight") and exc.reason != "refused":
                self.aborted = exc.reason
        except SessionInactive:
            rec.verdict, rec.reason = "skipped", "no-session"
        rec.exchanges = self.exchanges - before
        self.log.steps.append(rec)
        return rec

    def run(self, script: Sequence[dict]) -> TranscriptLog:
        for i, step in enumerate(script):
            self.run_step(i, step)
        return self.log


def client_run(
    cfg: ClientConfig,
    script: Sequence[dict],
    transport: Transport,
    verifier: Verifier,
    **kwargs,
) -> TranscriptLog:
    """Run preflight, handshake, provisioning and trusted requests in order."""
    return Client(cfg, transport, verifier, **kwargs).run(script)


__all__ = [
    "Client",
    "ClientAbort",
    "HttpaError",
    "PreflightRejected",
    "PreflightResult",
    "ServiceEvent",
    "StepRecord",
    "TService",
    "TcpTransport",
    "TranscriptLog",
    "client_run",
    "echo_app",
    "serve_tcp",
]
