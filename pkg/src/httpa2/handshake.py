"""The one-round-trip attest handshake and attest-base bookkeeping."""

from __future__ import annotations

import enum
import hashlib
import logging
import os
import threading
import time
from dataclasses import dataclass, field
from datetime import datetime, timezone
from typing import Callable, Sequence

from cryptography.exceptions import InvalidSignature
from cryptography.hazmat.primitives import serialization
from cryptography.hazmat.primitives.asymmetric import ed25519

from . import crypto
from . import fields as sf
from .attest import AppraisalPolicy, Identity, QService, Quote, Verifier, appraise_quotes, compute_qudd
from .config import ClientConfig, ServiceConfig
from .crypto import KeyShare, RandomSource, SequenceCounter, SessionKeys
from .errors import (
    AlreadyTerminated,
    ClientQuoteRejected,
    InvalidPeerShare,
    MalformedQuote,
    MissingField,
    NegotiationFailure,
    NegotiationMismatch,
    NoCommonGroup,
    NoCommonSuite,
    ProtocolReject,
    QuoteRejected,
    ResourceExhausted,
    AuthenticationFailure,
)
from .session import Session, TERMINATION_METHODS
from .wire import ATTEST_METHOD, AttestHeaderLine, Message, attest_lines, canonical_transcript

log = logging.getLogger(__name__)

Clock = Callable[[], float]

CREATION_METHODS = ("new", "reuse", "shared")


def format_date(ts: float) -> str:
    return datetime.fromtimestamp(ts, timezone.utc).strftime("%Y-%m-%dT%H:%M:%SZ")


def parse_date(text: str) -> float:
    return datetime.strptime(text, "%Y-%m-%dT%H:%M:%SZ").replace(tzinfo=timezone.utc).timestamp()


def _ahl(name: str, value) -> tuple[str, bytes]:
    return AttestHeaderLine(name, value).to_header()


def _version_item(version: str) -> sf.Item:
    # Numeric versions travel as integers; tokens cannot start with a digit.
    return sf.Item(int(version) if version.isdigit() else sf.Token(version))


def _tokens(items) -> list[str]:
    out = []
    for item in items:
        if isinstance(item.value, int) and not isinstance(item.value, bool):
            out.append(str(item.value))
            continue
        if not isinstance(item.value, sf.Token):
            raise MissingField("malformed-field", "expected a list of tokens")
        out.append(str(item.value))
    return out


# ---------------------------------------------------------------------------
# Attest bases
# ---------------------------------------------------------------------------


class BaseState(str, enum.Enum):
    allocated = "allocated"
    active = "active"
    expired = "expired"
    terminated = "terminated"


@dataclass(eq=False)
class Instance:
    """A TService execution resource that backs one or more bases."""

    id: int
    identity: Identity
    shareable: bool = False
    namespaces: dict = field(default_factory=dict, repr=False)
    bases: set = field(default_factory=set)

    def wipe(self) -> None:
        for store in self.namespaces.values():
            store.clear()
        self.namespaces.clear()


@dataclass(eq=False)
class AttestBase:
    base_id: str
    instance: Instance
    keys: SessionKeys | None = field(default=None, repr=False)
    policies: dict = field(default_factory=dict)
    created_at: float = 0.0
    expires_at: float = 0.0
    state: BaseState = BaseState.allocated
    recv_counter: SequenceCounter = field(default_factory=SequenceCounter)
    send_counter: SequenceCounter = field(default_factory=SequenceCounter)
    reusable: bool = False
    strict: bool = False
    lock: threading.RLock = field(default_factory=threading.RLock, repr=False)

    @property
    def secret_store(self) -> list:
        """Secrets provisioned by this base's client, in index order."""
        return self.instance.namespaces.setdefault(self.base_id, [])

    @property
    def live(self) -> bool:
        return self.state in (BaseState.allocated, BaseState.active)

    def activate(self) -> None:
        if self.state != BaseState.allocated:
            raise ValueError(f"cannot activate a base in state {self.state.value}")
        self.state = BaseState.active


def _blocked(identity: Identity, blocklist: Sequence) -> bool:
    for entry in blocklist:
        if isinstance(entry, bytes) and entry == identity.measurement:
            return True
        if isinstance(entry, str) and entry in (identity.isv_id, identity.tee_id, identity.measurement.hex()):
            return True
    return False


class Registry:
    """Live bases, reusable and shareable instances, guarded by one lock."""

    def __init__(self, max_instances: int = 64, rng: RandomSource = os.urandom):
        self.max_instances = max_instances
        self.rng = rng
        self.bases: dict[str, AttestBase] = {}
        self.instances: dict[int, Instance] = {}
        self.reuse_pool: list[Instance] = []
        self._issued: set[str] = set()
        self._next_instance = 0
        self._lock = threading.RLock()

    def _new_instance(self, identity: Identity, shareable: bool) -> Instance:
        if len(self.instances) >= self.max_instances:
            raise ResourceExhausted(detail="instance cap reached")
        self._next_instance += 1
        inst = Instance(self._next_instance, identity, shareable)
        self.instances[inst.id] = inst
        return inst

    def _new_id(self) -> str:
        while True:
            base_id = sf.b64url_encode(self.rng(16))
            if base_id not in self._issued:
                self._issued.add(base_id)
                return base_id

    def shared_instances(self) -> list[Instance]:
        return [i for i in self.instances.values() if i.shareable and i not in self.reuse_pool]

    def allocate(
        self,
        creation: str,
        identity: Identity,
        *,
        policies: dict | None = None,
        blocklist: Sequence = (),
        keys: SessionKeys | None = None,
        now: float,
        max_age: int,
    ) -> AttestBase:
        if creation not in CREATION_METHODS:
            raise ValueError(f"unknown creation method {creation!r}")
        with self._lock:
            if _blocked(identity, blocklist):
                raise ResourceExhausted(detail="every candidate instance is blocklisted")
            inst = None
            if creation == "reuse":
                for candidate in self.reuse_pool:
                    if not _blocked(candidate.identity, blocklist):
                        inst = candidate
                        self.reuse_pool.remove(candidate)
                        inst.wipe()
                        break
            elif creation == "shared":
                inst = next((i for i in self.shared_instances() if not _blocked(i.identity, blocklist)), None)
            if inst is None:
                inst = self._new_instance(identity, shareable=creation == "shared")
            base = AttestBase(
                self._new_id(),
                inst,
                keys=keys,
                policies=dict(policies or {}),
                created_at=now,
                expires_at=now + max_age,
                reusable=creation == "reuse",
            )
            inst.bases.add(base.base_id)
            self.bases[base.base_id] = base
            return base

    def release(self, base: AttestBase) -> None:
        """Undo an allocation whose handshake failed afterwards."""
        with self._lock:
            self.bases.pop(base.base_id, None)
            inst = base.instance
            inst.bases.discard(base.base_id)
            inst.namespaces.pop(base.base_id, None)
            if not inst.bases and not inst.shareable:
                self.instances.pop(inst.id, None)
            base.state = BaseState.terminated
            base.keys = None

    def lookup(self, base_id: str, now: float) -> AttestBase | None:
        with self._lock:
            base = self.bases.get(base_id)
            if base is None or not base.live:
                return None
            if now >= base.expires_at:
                self._expire(base)
                return None
            return base

    def _expire(self, base: AttestBase) -> None:
        base.state = BaseState.expired
        base.keys = None
        self.bases.pop(base.base_id, None)
        inst = base.instance
        inst.bases.discard(base.base_id)
        store = inst.namespaces.pop(base.base_id, [])
        store.clear()
        if not inst.bases and not inst.shareable:
            self.instances.pop(inst.id, None)

    def sweep(self, now: float) -> int:
        with self._lock:
            stale = [b for b in self.bases.values() if now >= b.expires_at]
            for base in stale:
                self._expire(base)
            return len(stale)

    def terminate(self, base: AttestBase, method: str) -> None:
        if method not in TERMINATION_METHODS:
            raise ValueError(f"unknown termination method {method!r}")
        with self._lock, base.lock:
            if not base.live:
                raise AlreadyTerminated(f"base {base.base_id} is {base.state.value}")
            inst = base.instance
            base.state = BaseState.terminated
            base.keys = None
            base.recv_counter.reset()
            base.send_counter.reset()
            self.bases.pop(base.base_id, None)
            inst.bases.discard(base.base_id)
            if method == "keep":
                log.warning("base %s kept resident and shareable; residual data may leak to later clients", base.base_id)
                inst.shareable = True
                return
            own = inst.namespaces.pop(base.base_id, [])
            own.clear()
            if inst.bases:
                # Other clients still share this instance; only our data goes.
                return
            inst.wipe()
            if method == "cleanup":
                inst.shareable = False
                self.reuse_pool.append(inst)
            else:
                self.instances.pop(inst.id, None)
                if inst in self.reuse_pool:
                    self.reuse_pool.remove(inst)


def allocate_base(creation: str, policies: dict, blocklist: Sequence, registry: Registry, identity: Identity, *, now: float, max_age: int) -> AttestBase:
    return registry.allocate(creation, identity, policies=policies, blocklist=blocklist, now=now, max_age=max_age)


# ---------------------------------------------------------------------------
# Request fields
# ---------------------------------------------------------------------------


@dataclass
class AthsRequestFields:
    versions: list
    cipher_suites: list
    supported_groups: list
    key_shares: list
    random: bytes
    policies: dict = field(default_factory=dict)
    base_creation: str = "new"
    blocklist: list = field(default_factory=list)
    date: str | None = None
    client_quotes: list = field(default_factory=list)
    signatures: list = field(default_factory=list)
    transport: bytes | None = None

    @classmethod
    def from_message(cls, msg: Message) -> "AthsRequestFields":
        try:
            lines = {}
            for ahl in attest_lines(msg):
                if ahl.name in lines:
                    raise MissingField("malformed-field", f"duplicate {ahl.name}")
                lines[ahl.name] = ahl.value
        except sf.FieldSyntaxError as exc:
            raise MissingField("malformed-field", str(exc)) from None

        def need(name):
            if name not in lines:
                raise MissingField(detail=f"missing {name}")
            return lines[name]

        random = need("Attest-Random").value
        if not isinstance(random, bytes) or len(random) != crypto.RANDOM_LEN:
            raise MissingField("malformed-field", "Attest-Random must be 32 bytes")
        shares = []
        for item in need("Attest-Key-Shares"):
            group = item.param("group")
            if not isinstance(item.value, bytes) or not isinstance(group, str):
                raise MissingField("malformed-field", "bad key share")
            shares.append((str(group), item.value))
        groups = _tokens(need("Attest-Supported-Groups"))
        if any(g not in groups for g, _ in shares):
            raise MissingField("malformed-field", "key share for a group that was not offered")
        policies = {}
        for key, item in lines.get("Attest-Policies", {}).items():
            policies[key] = item.value if not isinstance(item.value, sf.Token) else str(item.value)
        creation = str(lines["Attest-Base-Creation"].value) if "Attest-Base-Creation" in lines else "new"
        if creation not in CREATION_METHODS:
            raise MissingField("malformed-field", f"bad creation method {creation!r}")
        date = lines.get("Attest-Date")
        transport = lines.get("Attest-Transport")
        return cls(
            versions=_tokens(need("Attest-Versions")),
            cipher_suites=_tokens(need("Attest-Cipher-Suites")),
            supported_groups=groups,
            key_shares=shares,
            random=random,
            policies=policies,
            base_creation=creation,
            blocklist=[i.value for i in lines.get("Attest-Blocklist", [])],
            date=date.value if date is not None else None,
            client_quotes=list(lines.get("Attest-Quotes", [])),
            signatures=list(lines.get("Attest-Signatures", [])),
            transport=transport.value if transport is not None else None,
        )


# ---------------------------------------------------------------------------
# Client side
# ---------------------------------------------------------------------------


@dataclass
class ClientHandshakeState:
    request: Message
    request_transcript: bytes
    random: bytes
    key_shares: dict = field(repr=False)
    config: ClientConfig = field(repr=False)


def _sign_transcript(transcript: bytes, rng: RandomSource) -> sf.Item:
    key = ed25519.Ed25519PrivateKey.from_private_bytes(rng(32))
    pk = key.public_key().public_bytes(serialization.Encoding.Raw, serialization.PublicFormat.Raw)
    return sf.Item(key.sign(transcript), {"pk": pk})


def client_begin(
    cfg: ClientConfig,
    *,
    rng: RandomSource = os.urandom,
    clock: Clock = time.time,
    client_qservice: QService | None = None,
    host: str | None = None,
) -> tuple[Message, ClientHandshakeState]:
    """Build the AtHS request; keeps private shares and the transcript."""
    share_groups = cfg.key_share_groups or cfg.groups[:1]
    shares = {g: crypto.generate_key_share(g, rng) for g in share_groups}
    random = rng(crypto.RANDOM_LEN)
    policies = {
        "attestation": sf.Item(sf.Token(cfg.attestation)),
        "allowUntrustedReq": sf.Item(bool(cfg.allow_untrusted)),
        "strictReplay": sf.Item(bool(cfg.strict_replay)),
    }
    headers = [("Host", host or cfg.host)]
    headers += [
        _ahl("Attest-Versions", [_version_item(v) for v in cfg.versions]),
        _ahl("Attest-Cipher-Suites", [sf.Item(sf.Token(s)) for s in cfg.suites]),
        _ahl("Attest-Supported-Groups", [sf.Item(sf.Token(g)) for g in cfg.groups]),
        _ahl("Attest-Key-Shares", [sf.Item(s.public, {"group": sf.Token(g)}) for g, s in shares.items()]),
        _ahl("Attest-Random", sf.Item(random)),
        _ahl("Attest-Policies", policies),
        _ahl("Attest-Base-Creation", sf.Item(sf.Token(cfg.base_creation))),
    ]
    if cfg.blocklist:
        headers.append(_ahl("Attest-Blocklist", [sf.Item(_blocklist_item(b)) for b in cfg.blocklist]))
    headers.append(_ahl("Attest-Date", sf.Item(format_date(clock()))))
    request = Message.request(ATTEST_METHOD, cfg.target, headers=headers)

    if cfg.mhttpa:
        if client_qservice is None:
            raise ValueError("mHTTPA needs a client-side quoting service")
        qudd = compute_qudd(canonical_transcript(attest_lines(request)))
        quote = client_qservice.generate_quote(cfg.client_identity, qudd, random)
        request = request.with_header(*_ahl("Attest-Quotes", [quote.to_item()]))
    if cfg.sign_requests:
        sig = _sign_transcript(canonical_transcript(attest_lines(request)), rng)
        request = request.with_header(*_ahl("Attest-Signatures", [sig]))

    transcript = canonical_transcript(attest_lines(request))
    return request, ClientHandshakeState(request, transcript, random, shares, cfg)


def _blocklist_item(entry):
    if isinstance(entry, bytes):
        return entry
    return sf.Token(entry) if sf._TOKEN_RE.fullmatch(entry) else entry


def client_finish(
    state: ClientHandshakeState,
    resp: Message,
    verifier: Verifier,
    policy: AppraisalPolicy | None = None,
    *,
    tracker: crypto.NonceTracker | None = None,
) -> Session:
    """Verify the service quotes over both transcripts, then derive keys."""
    cfg = state.config
    policy = policy or cfg.policy
    if resp.status != 200:
        raise ProtocolReject("refused", f"handshake refused with status {resp.status}")
    quote_lines = resp.get_all("Attest-Quotes")
    if not quote_lines:
        raise MissingField("missing-quotes", "response carries no Attest-Quotes")
    if len(quote_lines) > 1:
        raise QuoteRejected("malformed-quote", "more than one Attest-Quotes field")
    names = resp.attest_names()
    if names[-1].lower() != "attest-quotes":
        # Quotes cover every AHL before them, so they must come last.
        raise QuoteRejected("malformed-quote", "Attest-Quotes is not the final AHL")
    try:
        quotes = [Quote.from_item(i) for i in sf.parse_list(quote_lines[0])]
        response_transcript = canonical_transcript(attest_lines(resp, exclude=["Attest-Quotes"]))
    except MalformedQuote:
        raise QuoteRejected("malformed-quote") from None
    except sf.FieldSyntaxError:
        # An unparsable AHL cannot match the transcript the service signed.
        raise QuoteRejected("qudd-mismatch") from None
    expected = compute_qudd(state.request_transcript, response_transcript)
    verdict = appraise_quotes(quotes, verifier, policy, expected, state.random, cfg.attestation)
    if not verdict:
        raise QuoteRejected(verdict.reason)

    lines = {a.name: a.value for a in attest_lines(resp)}

    def need(name):
        if name not in lines:
            raise MissingField(detail=f"missing {name}")
        return lines[name]

    version = str(need("Attest-Version").value)
    suite_id = str(need("Attest-Cipher-Suite").value)
    group = str(need("Attest-Supported-Group").value)
    share = need("Attest-Key-Share")
    service_random = need("Attest-Random").value
    base_item = need("Attest-Base-ID")
    if version not in cfg.versions or suite_id not in cfg.suites or group not in cfg.groups:
        raise NegotiationMismatch(detail="service chose a parameter the client did not offer")
    if group not in state.key_shares or share.param("group") != group:
        raise NegotiationMismatch(detail="service key share does not match the chosen group")
    if not isinstance(base_item.value, bytes) or not base_item.value:
        raise MissingField("missing-field", "empty Attest-Base-ID")

    suite = crypto.get_suite(suite_id)
    own = state.key_shares[group]
    shared = crypto.derive_shared_secret(own, share.value)
    keys = crypto.derive_key_schedule(suite, shared, state.random, service_random, hashlib.sha256(state.request_transcript).digest())
    for ks in state.key_shares.values():
        ks.erase()

    max_age = base_item.param("max-age")
    expires = lines.get("Attest-Expires")
    expires_at = parse_date(expires.value) if expires is not None else float("inf")
    session = Session(sf.b64url_encode(base_item.value), keys, expires_at, strict=cfg.strict_replay, tracker=tracker)
    session.max_age = max_age
    if "Attest-Secrets" in lines:
        for j, item in enumerate(lines["Attest-Secrets"]):
            try:
                session.service_secrets.append(
                    crypto.unwrap_secret(suite, keys.service_write_key, keys.service_iv, 0, j, item.value)
                )
            except AuthenticationFailure:
                raise QuoteRejected("bad-secret") from None
    return session


# ---------------------------------------------------------------------------
# Service side
# ---------------------------------------------------------------------------


@dataclass
class AthsOutcome:
    response: Message
    base: AttestBase | None = None
    reason: str | None = None


_STATUS_FOR = {
    "resource-exhausted": 503,
    "client-quote-rejected": 403,
    "bad-signature": 403,
}


def _error_response(status: int, date_header: tuple) -> Message:
    body = {400: b"Bad Request\n", 403: b"Forbidden\n", 503: b"Service Unavailable\n"}[status]
    return Message.response(status, headers=date_header, body=body)


def _check_signatures(req: Message, items: list, cfg: ServiceConfig) -> None:
    transcript = canonical_transcript(attest_lines(req, exclude=["Attest-Signatures"]))
    for item in items:
        pk = item.param("pk")
        if not isinstance(item.value, bytes) or not isinstance(pk, bytes):
            raise ClientQuoteRejected("bad-signature")
        if cfg.client_signature_keys and pk not in cfg.client_signature_keys:
            raise ClientQuoteRejected("untrusted-signature-key")
        try:
            ed25519.Ed25519PublicKey.from_public_bytes(pk).verify(item.value, transcript)
        except (InvalidSignature, ValueError):
            raise ClientQuoteRejected("bad-signature") from None


def service_handle_aths(
    req: Message,
    registry: Registry,
    cfg: ServiceConfig,
    qservice: QService,
    *,
    client_verifier: Verifier | None = None,
    rng: RandomSource = os.urandom,
    clock: Clock = time.time,
    date_header: tuple = (),
    tracker: crypto.NonceTracker | None = None,
) -> AthsOutcome:
    """Key exchange, base allocation and quote exchange in one response."""
    try:
        f = AthsRequestFields.from_message(req)
        request_ahls = attest_lines(req)
        request_transcript = canonical_transcript(request_ahls)
        now = clock()
        if cfg.date_skew is not None and f.date is not None:
            try:
                if abs(parse_date(f.date) - now) > cfg.date_skew:
                    raise NegotiationFailure("date-skew")
            except (TypeError, ValueError):
                raise MissingField("malformed-field", "bad Attest-Date") from None
        version = next((v for v in f.versions if v in cfg.versions), None)
        if version is None:
            raise NegotiationFailure("no-common-version")
        offered_groups = [g for g in f.supported_groups if g in {s for s, _ in f.key_shares}]
        suite, group = crypto.negotiate(f.cipher_suites, offered_groups, cfg.suites, cfg.groups)

        if f.client_quotes or cfg.require_client_quotes:
            if client_verifier is None:
                raise ClientQuoteRejected("no-client-verifier")
            try:
                quotes = [Quote.from_item(i) for i in f.client_quotes]
            except MalformedQuote:
                raise ClientQuoteRejected("malformed-quote") from None
            expected = compute_qudd(canonical_transcript(attest_lines(req, exclude=["Attest-Quotes", "Attest-Signatures"])))
            verdict = appraise_quotes(quotes, client_verifier, cfg.client_policy, expected, f.random, "direct")
            if not verdict:
                raise ClientQuoteRejected(verdict.reason)
        if f.signatures:
            _check_signatures(req, f.signatures, cfg)

        peer = dict(f.key_shares)[group]
        own = crypto.generate_key_share(group, rng)
        try:
            shared = crypto.derive_shared_secret(own, peer)
        finally:
            own_public = own.public
            own.erase()
        service_random = rng(crypto.RANDOM_LEN)
        keys = crypto.derive_key_schedule(suite, shared, f.random, service_random, hashlib.sha256(request_transcript).digest())

        policies = dict(f.policies)
        base = registry.allocate(
            f.base_creation,
            cfg.identity,
            policies=policies,
            blocklist=f.blocklist,
            keys=keys,
            now=now,
            max_age=cfg.base_max_age,
        )
    except (NoCommonSuite, NoCommonGroup, InvalidPeerShare, NegotiationFailure, MissingField) as exc:
        log.info("handshake refused: %s", exc.reason)
        return AthsOutcome(_error_response(400, date_header), None, exc.reason)
    except ClientQuoteRejected as exc:
        log.info("client quote rejected: %s", exc.reason)
        return AthsOutcome(_error_response(403, date_header), None, exc.reason)
    except ResourceExhausted as exc:
        return AthsOutcome(_error_response(503, date_header), None, exc.reason)

    try:
        base.strict = bool(policies.get("strictReplay", False))
        base_id_bytes = sf.b64url_decode(base.base_id)
        headers = list(date_header)
        headers += [
            _ahl("Attest-Version", _version_item(version)),
            _ahl("Attest-Cipher-Suite", sf.Item(sf.Token(suite.id))),
            _ahl("Attest-Supported-Group", sf.Item(sf.Token(group))),
            _ahl("Attest-Key-Share", sf.Item(own_public, {"group": sf.Token(group)})),
            _ahl("Attest-Random", sf.Item(service_random)),
            _ahl("Attest-Base-ID", sf.Item(base_id_bytes, {"max-age": cfg.base_max_age})),
            _ahl("Attest-Expires", sf.Item(format_date(base.expires_at))),
        ]
        if cfg.service_secrets:
            wrapped = [
                sf.Item(crypto.wrap_secret(suite, keys.service_write_key, keys.service_iv, 0, j, s, tracker))
                for j, s in enumerate(cfg.service_secrets)
            ]
            headers.append(_ahl("Attest-Secrets", wrapped))
        response = Message.response(200, headers=headers)
        response_transcript = canonical_transcript(attest_lines(response))
        qudd = compute_qudd(request_transcript, response_transcript)
        quotes = [
            qservice.generate_quote(identity, qudd, f.random).to_item(cfg.quote_max_age)
            for identity in (cfg.identity, *cfg.extra_identities)
        ]
        response = response.with_header(*_ahl("Attest-Quotes", quotes))
        base.activate()
    except Exception:
        registry.release(base)
        raise
    return AthsOutcome(response, base, None)
