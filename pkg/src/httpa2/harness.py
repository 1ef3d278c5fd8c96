"""Scenario runner: boots a service, optional middlebox hops and clients,
runs a scripted exchange and checks the verdicts it produces."""

from __future__ import annotations

import json
import random
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path
from typing import Callable

from . import fields as sf
from .attest import AppraisalPolicy, Identity, QService, Verifier
from .config import ClientConfig, ServiceConfig
from .crypto import NonceTracker
from .errors import EnvironmentFailure, HttpaError
from .middlebox import CaptureLog, Middlebox, TamperRule
from .stack import GENERIC_404_BODY, Client, StepRecord, TcpTransport, TService, serve_tcp
from .wire import AttestHeaderLine, Message, parse_message, serialize_message

EPOCH = 1_700_000_000.0

# Client reasons that only echo a service-side decision.
PASSIVE_REASONS = ("refused",)


class ManualClock:
    def __init__(self, start: float = EPOCH):
        self.now = start

    def __call__(self) -> float:
        return self.now

    def advance(self, seconds: float) -> None:
        self.now += seconds


def seeded_rng(seed, label: str) -> Callable[[int], bytes]:
    """Independent deterministic byte streams per component."""
    return random.Random(f"{seed}/{label}").randbytes


@dataclass
class Scenario:
    name: str
    script: list
    expect: list
    seed: int = 0
    hops: int = 0
    rules: list = field(default_factory=list)
    service: dict = field(default_factory=dict)
    clients: dict = field(default_factory=dict)
    description: str = ""
    check_leaks: bool = True

    @classmethod
    def from_dict(cls, d: dict) -> "Scenario":
        try:
            s = cls(
                name=d["name"],
                script=list(d["script"]),
                expect=list(d["expect"]),
                seed=d.get("seed", 0),
                hops=d.get("topology", {}).get("hops", 0),
                rules=list(d.get("rules", [])),
                service=dict(d.get("service", {})),
                clients=dict(d.get("clients", {})),
                description=d.get("description", ""),
                check_leaks=d.get("check_leaks", True),
            )
        except (KeyError, TypeError, AttributeError) as exc:
            raise EnvironmentFailure(f"invalid scenario: {exc}") from exc
        if len(s.expect) != len(s.script):
            raise EnvironmentFailure(f"{s.name}: expected verdicts must cover every step")
        if any(r.get("hop", 0) >= s.hops for r in s.rules):
            raise EnvironmentFailure(f"{s.name}: tamper rule targets a hop that does not exist")
        return s

    @classmethod
    def load(cls, path) -> "Scenario":
        try:
            data = json.loads(Path(path).read_text())
        except (OSError, ValueError) as exc:
            raise EnvironmentFailure(f"cannot load scenario {path}: {exc}") from exc
        return cls.from_dict(data)


@dataclass
class Report:
    name: str
    passed: bool
    steps: list
    failures: list
    leaks: list = field(default_factory=list)
    hops: int = 0

    def verdicts(self) -> list[tuple]:
        return [(s["op"], s["verdict"], s["reason"]) for s in self.steps]

    def to_json(self) -> str:
        return json.dumps(
            {"name": self.name, "passed": self.passed, "hops": self.hops, "failures": self.failures, "leaks": self.leaks, "steps": self.steps},
            indent=2,
            default=str,
        )

    def summary(self) -> str:
        line = f"{'PASS' if self.passed else 'FAIL'} {self.name}"
        return line + "".join(f"\n  - {f}" for f in self.failures)


def _service_config(d: dict) -> ServiceConfig:
    d = dict(d)
    if "service_secrets" in d:
        d["service_secrets"] = tuple(s.encode() for s in d["service_secrets"])
    if "extra_identities" in d:
        d["extra_identities"] = tuple(Identity.from_code(c.encode()) for c in d["extra_identities"])
    if "svn" in d:
        d["identity"] = Identity.from_code(b"httpa2 reference tservice", svn=d.pop("svn"))
    for key in ("versions", "suites", "groups", "allow_methods"):
        if key in d:
            d[key] = tuple(d[key])
    return ServiceConfig(**d)


def _client_config(d: dict) -> ClientConfig:
    d = dict(d)
    if "policy" in d:
        p = d.pop("policy")
        d["policy"] = AppraisalPolicy(
            min_svn=p.get("min_svn", 0),
            require_known_isv=p.get("require_known_isv", False),
            known_isvs=frozenset(p.get("known_isvs", ())),
        )
    for key in ("versions", "suites", "groups", "key_share_groups", "blocklist", "preflight_headers"):
        if key in d and d[key] is not None:
            d[key] = tuple(d[key])
    return ClientConfig(**d)


def _secret_needles(secret: bytes) -> list[bytes]:
    return [secret, sf.b64url_encode(secret).encode(), secret.hex().encode()]


def _registry_snapshot(service: TService) -> dict:
    reg = service.registry
    return {
        "live_bases": len(reg.bases),
        "instances": len(reg.instances),
        "reuse_pool": len(reg.reuse_pool),
        "reuse_pool_secrets": sum(len(s) for i in reg.reuse_pool for s in i.namespaces.values()),
        "shareable": sum(1 for i in reg.instances.values() if i.shareable),
    }


class _Run:
    """Mutable state of one scenario execution."""

    def __init__(self, s: Scenario, extra_hops: int, tcp: bool):
        self.s = s
        self.clock = ManualClock()
        self.tracker = NonceTracker()
        seed = s.seed
        self.qservice = QService(rng=seeded_rng(seed, "qservice"))
        self.client_q = QService(rng=seeded_rng(seed, "client-qservice"))
        self.service = TService(
            _service_config(s.service),
            self.qservice,
            client_verifier=Verifier([self.client_q.anchor()]),
            rng=seeded_rng(seed, "service"),
            clock=self.clock,
            tracker=self.tracker,
        )
        self.servers = []
        upstream = self.service.handle_bytes
        if tcp:
            srv = serve_tcp(upstream)
            self.servers.append(srv)
            upstream = TcpTransport(*srv.server_address[:2])
        rules = [[] for _ in range(s.hops)]
        for r in s.rules:
            rules[r.get("hop", 0)].append(TamperRule.from_dict(r))
        # Transparent hops sit between the scripted hops and the service.
        rules += [[] for _ in range(extra_hops)]
        self.logs = [CaptureLog() for _ in rules]
        for hop_rules, log in reversed(list(zip(rules, self.logs))):
            mb = Middlebox(upstream, hop_rules, log, clock=self.clock)
            upstream = mb
            if tcp:
                srv = serve_tcp(mb)
                self.servers.append(srv)
                upstream = TcpTransport(*srv.server_address[:2])
        if not rules:
            self.logs = [CaptureLog()]
            upstream = _tap(upstream, self.logs[0], self.clock)
        self.transport = upstream
        self.verifier = Verifier([self.qservice.anchor()])
        self.clients: dict[str, Client] = {}
        self.secrets: list[bytes] = [x.encode() for x in s.service.get("service_secrets", [])]
        self.base_instances: dict[int, int] = {}

    def client(self, name: str) -> Client:
        if name not in self.clients:
            cfg = _client_config(self.s.clients.get(name, {}))
            self.clients[name] = Client(
                cfg,
                self.transport,
                self.verifier,
                rng=seeded_rng(self.s.seed, f"client/{name}"),
                clock=self.clock,
                qservice=self.client_q,
                tracker=self.tracker,
            )
        return self.clients[name]

    def close(self) -> None:
        for srv in self.servers:
            srv.shutdown()
            srv.server_close()


def _tap(upstream, log: CaptureLog, clock):
    from .middlebox import CaptureEntry

    def tap(data: bytes) -> bytes:
        out = upstream(data)
        log.append(CaptureEntry("request", data, None, clock(), data))
        log.append(CaptureEntry("response", out, None, clock(), out))
        return out

    return tap


def _probe(run: _Run, index: int, step: dict) -> StepRecord:
    """A trusted request for a base id nobody was issued."""
    rng = seeded_rng(run.s.seed, f"probe/{index}")
    name, value = AttestHeaderLine("Attest-Base-ID", sf.Item(rng(16))).to_header()
    req = Message.request("GET", step.get("target", "/"), headers=[("Host", "probe"), (name, value)]).with_trailer(
        "Attest-Ticket", ":" + sf.b64url_encode(rng(16)) + ":;seq=1"
    )
    resp = parse_message(run.transport(serialize_message(req)))
    rec = StepRecord(index, "probe", "reject" if resp.status >= 400 else "accept", "refused" if resp.status >= 400 else None, resp.status, 1)
    rec.data["generic_404"] = resp.status == 404 and resp.body == GENERIC_404_BODY
    return rec


def _resend(run: _Run, index: int, step: dict) -> StepRecord:
    """Send the client's last request again, byte for byte."""
    client = run.client(step.get("client", "main"))
    sent = [data for direction, data in client.log.messages if direction == "request"]
    if not sent:
        raise EnvironmentFailure("resend before any request")
    resp = parse_message(run.transport(sent[-1]))
    ok = resp.status < 400
    return StepRecord(index, "resend", "accept" if ok else "reject", None if ok else "refused", resp.status, 1)


def _run_step(run: _Run, index: int, step: dict) -> dict:
    op = step["op"]
    events_before = len(run.service.events)
    if op == "advance":
        run.clock.advance(step["seconds"])
        rec = StepRecord(index, op, "accept")
    elif op == "inspect":
        rec = StepRecord(index, op, "accept")
        rec.data["registry"] = _registry_snapshot(run.service)
    elif op == "probe":
        rec = _probe(run, index, step)
    elif op == "resend":
        rec = _resend(run, index, step)
    else:
        name = step.get("client", "main")
        client = run.client(name)
        if op == "provision":
            run.secrets.extend(s.encode() for s in step.get("secrets", []))
        rec = client.run_step(index, step)
        rec.data["client"] = name
        if op == "handshake" and rec.verdict == "accept":
            base = run.service.registry.bases.get(client.session.base_id)
            rec.data["instance"] = base.instance.id if base else None
            run.base_instances[index] = rec.data["instance"]
        if op == "trr" and run.service.last_plaintext is not None:
            rec.data["app_headers"] = {n: v.decode("latin-1") for n, v in run.service.last_plaintext.headers}
    new_events = run.service.events[events_before:]
    service_reasons = [e.reason for e in new_events if e.reason is not None]
    out = rec.as_dict()
    out["client_reason"] = rec.reason
    out["service_reasons"] = service_reasons
    if rec.reason in PASSIVE_REASONS and service_reasons:
        out["reason"] = service_reasons[-1]
    return out


def _check(expect: dict, step: dict, steps: list) -> list[str]:
    problems = []
    for key, want in expect.items():
        if key == "same_instance_as":
            got = step.get("instance")
            ref = steps[want].get("instance")
            if got is None or got != ref:
                problems.append(f"instance {got} is not that of step {want} ({ref})")
        elif key == "different_instance_from":
            if step.get("instance") == steps[want].get("instance"):
                problems.append(f"instance equals that of step {want}")
        elif key in ("registry", "app_headers", "headers"):
            got = step.get(key, {})
            for k, v in want.items():
                if got.get(k) != v:
                    problems.append(f"{key}.{k}: expected {v!r}, got {got.get(k)!r}")
        elif step.get(key) != want:
            problems.append(f"{key}: expected {want!r}, got {step.get(key)!r}")
    return problems


def run_scenario(s: Scenario, *, extra_hops: int = 0, tcp: bool = False) -> Report:
    run = _Run(s, extra_hops, tcp)
    steps, failures = [], []
    try:
        for i, step in enumerate(s.script):
            try:
                steps.append(_run_step(run, i, step))
            except HttpaError as exc:
                raise EnvironmentFailure(f"step {i} ({step.get('op')}): {exc}") from exc
        for i, (want, got) in enumerate(zip(s.expect, steps)):
            failures += [f"step {i} ({got['op']}): {p}" for p in _check(want, got, steps)]
        leaks = scan_leaks(run) if s.check_leaks else []
        failures += [f"leak: {x}" for x in leaks]
    finally:
        run.close()
    return Report(s.name, not failures, steps, failures, leaks, s.hops + extra_hops)


def scan_leaks(run: _Run) -> list[str]:
    """Substring scan of every captured byte for secrets and key material."""
    needles = []
    for secret in run.secrets:
        needles += [("secret", n) for n in _secret_needles(secret)]
    for client in run.clients.values():
        if client.session is not None:
            for k in client.session.keys.material():
                needles += [("key", n) for n in _secret_needles(k)]
    found = []
    for hop, log in enumerate(run.logs):
        blob = b"\x00".join(log.all_bytes())
        for kind, needle in needles:
            if needle and needle in blob:
                found.append(f"{kind} bytes visible at hop {hop}")
    return sorted(set(found))


@dataclass
class Summary:
    reports: list

    @property
    def total(self) -> int:
        return len(self.reports)

    @property
    def failed(self) -> list:
        return [r for r in self.reports if not r.passed]

    @property
    def passed(self) -> bool:
        return not self.failed

    def text(self) -> str:
        lines = [r.summary() for r in self.reports]
        lines.append(f"{self.total - len(self.failed)}/{self.total} scenarios passed")
        return "\n".join(lines)


def scenario_files(directory) -> list[Path]:
    return sorted(Path(directory).glob("*.json"))


def run_all(directory, **kwargs) -> Summary:
    return Summary([run_scenario(Scenario.load(p), **kwargs) for p in scenario_files(directory)])


def bundled_dir() -> Path:
    return Path(str(resources.files("httpa2") / "scenarios"))
