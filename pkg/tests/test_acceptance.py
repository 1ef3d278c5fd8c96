"""End-to-end acceptance checks, one printed PASS/FAIL line per criterion.

Run under pytest, or directly with ``python tests/test_acceptance.py``.
"""

import random
from collections import Counter
from dataclasses import replace

import pytest

from httpa2 import crypto
from httpa2.attest import QService, Verifier
from httpa2.config import ClientConfig, ServiceConfig
from httpa2.handshake import Registry, client_begin, client_finish, service_handle_aths
from httpa2.harness import ManualClock, Scenario, bundled_dir, run_all, run_scenario, scenario_files, seeded_rng
from httpa2.session import Region, protect_request, validate_ticket
from httpa2.stack import GENERIC_404_BODY, Client, TService
from httpa2.sweep import run_sweep
from httpa2.wire import Message, parse_message

_printer = None


@pytest.fixture(autouse=True)
def _printer_fixture(capsys):
    global _printer
    _printer = capsys
    yield
    _printer = None


def report(n: int, ok: bool, text: str) -> None:
    line = f"{'PASS' if ok else 'FAIL'} criterion {n}: {text}"
    if _printer is not None:
        with _printer.disabled():
            print("\n" + line)
    else:
        print(line)
    assert ok, line


def _service(seed=0, **cfg):
    clock = ManualClock()
    q = QService(rng=seeded_rng(seed, "q"))
    svc = TService(ServiceConfig(**cfg), q, rng=seeded_rng(seed, "s"), clock=clock)
    return svc, Verifier([q.anchor()]), clock


def test_criterion_1_one_rtt_and_key_agreement():
    happy = run_scenario(Scenario.load(bundled_dir() / "happy-path.json"))
    one_rtt = happy.passed and happy.steps[0]["op"] == "handshake" and happy.steps[0]["exchanges"] == 1
    rng = random.Random(2024)
    mismatches = 0
    for i in range(100):
        suites = list(ServiceConfig().suites)
        rng.shuffle(suites)
        ccfg = ClientConfig(suites=tuple(suites), groups=(rng.choice(["x25519", "secp256r1"]),))
        svc, verifier, clock = _service(seed=1000 + i)
        client = Client(ccfg, svc, verifier, rng=seeded_rng(1000 + i, "c"), clock=clock)
        session = client.handshake()
        base = svc.registry.bases[session.base_id]
        if client.exchanges != 1 or session.keys.material() != base.keys.material():
            mismatches += 1
    report(1, one_rtt and mismatches == 0, f"AtHS in 1 exchange; keys equal in {100 - mismatches}/100 randomized runs")


def test_criterion_2_crypto_vectors():
    ikm = bytes.fromhex("0b" * 22)
    salt = bytes.fromhex("000102030405060708090a0b0c")
    info = bytes.fromhex("f0f1f2f3f4f5f6f7f8f9")
    okm = crypto.hkdf_expand(crypto.hkdf_extract(salt, ikm), info, 42)
    hkdf_ok = okm.hex() == (
        "3cb25f25faacd57a90434f64d0362f2a2d2d0a90cf1a5a4c5db02d56ecc4c5bf34007208d5b887185865"
    )
    alice = bytes.fromhex("77076d0a7318a57d3c16c17251b26645df4c2f87ebc0992ab177fba51db92c2a")
    bob_pub = bytes.fromhex("de9edb7d7b7dc1b4d35b61c2ece435373f8343c85b78674dadfc7e146f882b4f")
    share = crypto.generate_key_share("x25519", lambda n: alice)
    x_ok = crypto.derive_shared_secret(share, bob_pub).hex() == (
        "4a5d9d5ba4ce2de1728e3bf480350f25e07e21c947d19e3376f09b3c1e161742"
    )
    suite = crypto.SUITES["HTTPA-AES128GCM-SHA256"]
    tag = crypto.seal(suite, bytes(16), bytes(12), 0, b"", b"")
    gcm_ok = tag.hex() == "58e2fccefa7e3061367f1d57a4e7455a"
    report(2, hkdf_ok and x_ok and gcm_ok, f"HKDF TC1 {hkdf_ok}, x25519 {x_ok}, AES-128-GCM zero vector {gcm_ok}")


# Each check family below is one check: the absent-element and structural
# reasons are that check refusing before it can run its MAC or signature.
CHECK_FAMILIES = {
    "qudd-mismatch": "quote",
    "malformed-quote": "quote",
    "missing-quotes": "quote",
    "bad-mac": "ticket",
    "missing-ticket": "ticket",
    "bad-binder": "binder",
    "missing-binder": "binder",
    "bad-cargo": "aead",
    "secret-rejected": "aead",
    "malformed-field": "structure",
    "missing-field": "structure",
    "no-common-version": "structure",
    "ambiguous-request": "structure",
    "unknown-base": "structure",
}
NAMED = {"qudd-mismatch", "bad-mac", "bad-binder", "bad-cargo", "secret-rejected"}


def test_criterion_3_tamper_sweep():
    results = run_sweep()
    protected = [r for r in results if r.mutation.protected]
    unprotected = [r for r in results if not r.mutation.protected]
    false_accepts = [r.mutation.label for r in protected if not r.checks]
    multi = [r.mutation.label for r in protected if len(r.checks) > 1]
    noisy = [r.mutation.label for r in unprotected if r.checks]
    unknown = [r.mutation.label for r in protected if r.checks and r.checks[0] not in CHECK_FAMILIES]
    named = sum(1 for r in protected if r.checks and r.checks[0] in NAMED)
    families = Counter(CHECK_FAMILIES.get(r.checks[0], "?") for r in protected if r.checks)
    ok = len(protected) >= 50 and not (false_accepts or multi or noisy or unknown)
    report(
        3,
        ok,
        f"{len(protected)} protected mutations each rejected by exactly one check "
        f"({named} by a MAC/AEAD/QUDD failure, the rest by that check's absent or malformed-element refusal: "
        f"{dict(sorted(families.items()))}); {len(unprotected)} unprotected mutations rejected 0 times"
        + (f"; false accepts {false_accepts}; multiple {multi}; noisy {noisy}; unknown {unknown}" if not ok else ""),
    )


def test_criterion_4_replay():
    svc, verifier, clock = _service(seed=4)
    client = Client(ClientConfig(), svc, verifier, rng=seeded_rng(4, "c"), clock=clock)
    client.handshake()
    client.provision([b"replay-secret"])
    client.request("POST", "/", b"data", [Region(0, 4)])
    sent = [m for d, m in client.log.messages if d == "request"][1:]
    outcomes = []
    for raw in sent:
        status = parse_message(svc.handle_bytes(raw)).status
        outcomes.append((status, svc.events[-1].reason))
    resend_ok = outcomes == [(403, "replay")] * len(sent)

    q = QService(rng=seeded_rng(4, "q2"))
    req, state = client_begin(ClientConfig(), rng=seeded_rng(4, "c2"))
    out = service_handle_aths(req, Registry(), ServiceConfig(), q, rng=seeded_rng(4, "s2"))
    session, base = client_finish(state, out.response, Verifier([q.anchor()])), out.base
    reqs = [protect_request(session, Message.request("GET", "/", headers=[("Host", "h")]))[0] for _ in range(1000)]
    order = list(range(1000))
    random.Random(44).shuffle(order)
    # Oracle: a delivery is accepted exactly when it carries last + 1.
    accepted, expected, last = [], [], 0
    for i in order:
        if validate_ticket(base, reqs[i], strict=True):
            accepted.append(i + 1)
        if i + 1 == last + 1:
            expected.append(i + 1)
            last = i + 1
    strict_ok = accepted == expected
    report(
        4,
        resend_ok and strict_ok,
        f"{len(sent)} resends rejected as replay; strict mode accepted exactly the last+1 run ({len(accepted)} of 1000 shuffled deliveries, matching the oracle)",
    )


def test_criterion_5_downgrade():
    s = Scenario.load(bundled_dir() / "downgrade-strip-suite.json")
    reasons = Counter()
    completed = 0
    for seed in range(30):
        r = run_scenario(replace(s, seed=seed, check_leaks=False))
        hs = r.steps[0]
        reasons[hs["reason"]] += 1
        completed += hs["verdict"] == "accept"
    ok = completed == 0 and reasons == Counter({"qudd-mismatch": 30})
    report(5, ok, f"strip-strongest-suite over 30 seeds: {dict(reasons)}, weaker sessions completed: {completed}")


def test_criterion_6_confidentiality():
    summary = run_all(bundled_dir())
    leaks = [(r.name, r.leaks) for r in summary.reports if r.leaks]
    report(6, not leaks, f"{summary.total} scenarios scanned, leaks: {leaks or 'none'}")


def test_criterion_7_atsp_failure():
    secrets = [b"s-zero-000", b"s-one-0001", b"s-two-0002", b"s-three-03"]
    bad = []
    for index in range(len(secrets)):
        svc, verifier, clock = _service(seed=70 + index)
        client = Client(ClientConfig(), svc, verifier, rng=seeded_rng(70 + index, "c"), clock=clock)
        client.run_step(0, {"op": "handshake"})
        base_id = client.session.base_id
        rec = client.run_step(1, {"op": "provision", "secrets": [s.decode() for s in secrets], "corrupt": index})
        gone = base_id not in svc.registry.bases and not svc.registry.instances
        after = []
        for k in range(3):
            client.run_step(2 + k, {"op": "trr", "body": "after"})
            raw = client.log.messages[-1][1]
            resp = parse_message(raw)
            after.append(resp.status == 404 and resp.body == GENERIC_404_BODY and svc.events[-1].reason == "unknown-base")
        if not (rec.status == 403 and gone and all(after)):
            bad.append(index)
    report(7, not bad, f"corrupting each of {len(secrets)} secret indices terminated the base and later requests got the generic 404" + (f"; failed {bad}" if bad else ""))


def _stale_request(client: Client) -> Message:
    client.session.active = True
    try:
        client.request("GET", "/", b"")
    except Exception:
        pass
    return parse_message(client.log.messages[-1][1])


def test_criterion_8_lifecycle():
    problems = []
    svc, verifier, clock = _service(seed=8)
    reg = svc.registry
    mk = lambda name, creation: Client(ClientConfig(base_creation=creation), svc, verifier, rng=seeded_rng(8, name), clock=clock)

    a = mk("a", "new")
    a.handshake()
    a.provision([b"cleanup-secret"])
    inst_a = reg.bases[a.session.base_id].instance
    a.request("POST", "/", b"bye", terminate="cleanup")
    if not (reg.reuse_pool == [inst_a] and inst_a.namespaces == {} and not reg.bases):
        problems.append("cleanup did not pool an empty instance")
    probe = _stale_request(a)
    if not (probe.status == 404 and probe.body == GENERIC_404_BODY):
        problems.append("cleaned-up base still answers")
    b = mk("b", "reuse")
    b.handshake()
    if reg.bases[b.session.base_id].instance is not inst_a or reg.bases[b.session.base_id].secret_store:
        problems.append("reuse did not take the pooled instance clean")

    b.request("POST", "/", b"bye", terminate="destroy")
    if reg.instances or reg.reuse_pool or reg.bases:
        problems.append("destroy left state behind")
    if _stale_request(b).status != 404:
        problems.append("destroyed base still answers")
    c = mk("c", "reuse")
    c.handshake()
    if reg.bases[c.session.base_id].instance is inst_a:
        problems.append("destroyed instance came back")

    c.provision([b"kept-secret"])
    inst_c = reg.bases[c.session.base_id].instance
    c.request("POST", "/", b"bye", terminate="keep")
    if not (inst_c.shareable and inst_c.id in reg.instances and not reg.bases):
        problems.append("keep did not leave a shareable instance")
    if _stale_request(c).status != 404:
        problems.append("kept base still answers on its old id")
    d = mk("d", "shared")
    d.handshake()
    joined = reg.bases[d.session.base_id]
    if joined.instance is not inst_c or joined.secret_store:
        problems.append("shared client did not join the kept instance with a fresh namespace")
    _, body, _ = d.request("POST", "/", b"hi", [Region(0, 2)])
    if body != b"hi":
        problems.append("shared base not usable")
    report(8, not problems, "cleanup pools, destroy removes, keep is joinable by a shared client" + (f"; {problems}" if problems else ""))


def test_criterion_9_preflight():
    svc, verifier, clock = _service(seed=9)
    req = Message.request(
        "OPTIONS",
        "/",
        headers=[("Host", "h"), ("Access-Control-Request-Headers", "Attest-Versions, Attest-Unsupported, Attest-Random")],
    )
    resp = svc.handle(req)
    allow = [m.strip() for m in resp.get("Allow").decode().split(",")]
    granted = [h.strip() for h in resp.get("Access-Control-Allow-Headers").decode().split(",")]
    client = Client(ClientConfig(), svc, verifier, clock=clock)
    client.preflight()
    clock.advance(int(resp.get("Access-Control-Max-Age")) - 1)
    client.preflight()
    options_sent = sum(1 for d, m in client.log.messages if d == "request" and m.startswith(b"OPTIONS"))
    ok = "ATTEST" in allow and "Attest-Unsupported" not in granted and "Attest-Versions" in granted and options_sent == 1
    report(9, ok, f"Allow {allow}; granted {granted}; OPTIONS sent within max-age: {options_sent}")


def test_criterion_10_transparency():
    diffs = []
    for path in scenario_files(bundled_dir()):
        s = Scenario.load(path)
        runs = [run_scenario(s, extra_hops=h) for h in (0, 1, 2)]
        if any(r.verdicts() != runs[0].verdicts() for r in runs) or not all(r.passed for r in runs):
            diffs.append(s.name)
    report(10, not diffs, f"{len(scenario_files(bundled_dir()))} scenarios give identical verdicts over 0, 1 and 2 extra hops" + (f"; differs: {diffs}" if diffs else ""))


if __name__ == "__main__":
    import logging
    import sys

    logging.getLogger("httpa2").setLevel(logging.ERROR)
    failed = 0
    for name, fn in sorted(globals().items(), key=lambda kv: int(kv[0].split("_")[2]) if kv[0].startswith("test_criterion_") else 0):
        if name.startswith("test_criterion_"):
            try:
                fn()
            except AssertionError:
                failed += 1
    sys.exit(1 if failed else 0)
