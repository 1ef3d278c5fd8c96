import hashlib
from dataclasses import replace

import pytest
from hypothesis import given, settings, strategies as st

from httpa2 import fields as sf
from httpa2.attest import AppraisalPolicy, Identity, QService, Verifier, compute_qudd
from httpa2.config import ClientConfig, ServiceConfig
from httpa2.errors import AlreadyTerminated, MissingField, NegotiationMismatch, QuoteRejected, ResourceExhausted
from httpa2.handshake import (
    BaseState,
    Registry,
    allocate_base,
    client_begin,
    client_finish,
    service_handle_aths,
)
from httpa2.harness import seeded_rng
from httpa2.wire import Message, attest_lines, canonical_transcript, parse_message, serialize_message


def run(ccfg, scfg, qservice, registry, verifier, *, seed=0, mutate_req=None, mutate_resp=None, **kw):
    req, state = client_begin(ccfg, rng=seeded_rng(seed, "c"), **kw.get("client", {}))
    wire_req = parse_message(serialize_message(req))
    if mutate_req:
        wire_req = mutate_req(wire_req)
    out = service_handle_aths(wire_req, registry, scfg, qservice, rng=seeded_rng(seed, "s"), **kw.get("service", {}))
    resp = parse_message(serialize_message(out.response))
    if mutate_resp:
        resp = mutate_resp(resp)
    return state, out, resp


def test_begin_fields_and_freshness(ccfg):
    r1, s1 = client_begin(ccfg)
    r2, s2 = client_begin(ccfg)
    assert r1.method == "ATTEST" and len(r1.attest_names()) >= 6
    assert not r1.has("Attest-Secrets") and not r1.has("Attest-Cargo") and not r1.body
    assert s1.random != s2.random
    assert r1.get("Attest-Key-Shares") != r2.get("Attest-Key-Shares")


def test_happy_path_keys_match(ccfg, scfg, qservice, registry, verifier):
    state, out, resp = run(ccfg, scfg, qservice, registry, verifier)
    assert out.response.status == 200 and out.base.state is BaseState.active
    for name in ("Attest-Base-ID", "Attest-Quotes", "Attest-Key-Share"):
        assert resp.has(name)
    session = client_finish(state, resp, verifier)
    assert session.keys == out.base.keys
    assert session.base_id == out.base.base_id


@settings(max_examples=15, deadline=None)
@given(st.sampled_from(["x25519", "secp256r1"]), st.sampled_from(list(ServiceConfig().suites)), st.integers(0, 10**6))
def test_key_agreement_property(group, suite, seed):
    q = QService(rng=seeded_rng(seed, "q"))
    ccfg = ClientConfig(groups=(group,), suites=(suite,))
    state, out, resp = run(ccfg, ServiceConfig(), q, Registry(), Verifier([q.anchor()]), seed=seed)
    session = client_finish(state, resp, Verifier([q.anchor()]))
    assert session.keys.material() == out.base.keys.material()
    assert session.suite.id == suite


def test_key_schedule_uses_request_transcript(ccfg, scfg, qservice, registry, verifier):
    state, out, resp = run(ccfg, scfg, qservice, registry, verifier)
    assert state.request_transcript == canonical_transcript(attest_lines(state.request))
    other = replace(state, request_transcript=state.request_transcript + b"x")
    with pytest.raises(QuoteRejected):
        client_finish(other, resp, verifier)


def _drop_first_suite(req):
    item = sf.parse_list(req.get("Attest-Cipher-Suites"))[1:]
    headers = [(n, sf.serialize_list(item).encode() if n == "Attest-Cipher-Suites" else v) for n, v in req.headers]
    return replace(req, headers=tuple(headers))


def test_downgrade_detected(ccfg, scfg, qservice, registry, verifier):
    state, out, resp = run(ccfg, scfg, qservice, registry, verifier, mutate_req=_drop_first_suite)
    assert out.response.status == 200  # the service cannot tell
    assert resp.get("Attest-Cipher-Suite") == b"HTTPA-AES128GCM-SHA256"
    with pytest.raises(QuoteRejected) as e:
        client_finish(state, resp, verifier)
    assert e.value.reason == "qudd-mismatch"


def _ahl_names(msg):
    return [n for n, _ in msg.headers if n.lower().startswith("attest-") and n != "Attest-Quotes"]


@pytest.mark.parametrize("action", ["drop", "modify", "duplicate", "reorder", "insert"])
def test_every_response_mutation_rejected(ccfg, scfg, qservice, registry, verifier, action):
    state, out, resp = run(ccfg, scfg, qservice, registry, verifier)
    for name in _ahl_names(resp):
        headers = list(resp.headers)
        i = next(k for k, (n, _) in enumerate(headers) if n == name)
        if action == "drop":
            del headers[i]
        elif action == "modify":
            headers[i] = (name, headers[i][1][:-1] + (b"0" if headers[i][1][-1:] != b"0" else b"1"))
        elif action == "duplicate":
            headers.insert(i, headers[i])
        elif action == "reorder":
            headers[i], headers[i + 1] = headers[i + 1], headers[i]
        else:
            headers.insert(i, ("Attest-Foo", b"1"))
        with pytest.raises((QuoteRejected, MissingField)):
            client_finish(state, replace(resp, headers=tuple(headers)), verifier)


def test_missing_quotes(ccfg, scfg, qservice, registry, verifier):
    state, out, resp = run(ccfg, scfg, qservice, registry, verifier)
    with pytest.raises(MissingField):
        client_finish(state, resp.without("Attest-Quotes"), verifier)


def test_chosen_suite_must_be_offered(scfg, qservice, registry, verifier):
    ccfg = ClientConfig(suites=("HTTPA-AES128GCM-SHA256",))
    state, out, resp = run(ccfg, scfg, qservice, registry, verifier)
    # A response for a suite the client never offered: the quote still covers it.
    state2 = replace(state, config=replace(state.config, suites=("HTTPA-CHACHA20POLY1305-SHA256",)))
    with pytest.raises(NegotiationMismatch):
        client_finish(state2, resp, verifier)


def test_no_common_suite_leaves_no_base(scfg, qservice, registry, verifier):
    ccfg = ClientConfig(suites=("HTTPA-UNKNOWN",))
    state, out, resp = run(ccfg, scfg, qservice, registry, verifier)
    assert out.response.status == 400 and out.base is None
    assert not resp.has("Attest-Base-ID") and not registry.bases


def test_malformed_field_is_400(ccfg, scfg, qservice, registry, verifier):
    bad = lambda r: replace(r, headers=tuple((n, b"::" if n == "Attest-Random" else v) for n, v in r.headers))
    state, out, resp = run(ccfg, scfg, qservice, registry, verifier, mutate_req=bad)
    assert out.response.status == 400 and not registry.bases


def test_mhttpa(scfg, qservice, registry, verifier):
    cq = QService(rng=seeded_rng(5, "cq"))
    ccfg = ClientConfig(mhttpa=True, sign_requests=True)
    scfg = replace(scfg, require_client_quotes=True)
    kw = dict(client={"client_qservice": cq}, service={"client_verifier": Verifier([cq.anchor()])})
    state, out, resp = run(ccfg, scfg, qservice, registry, verifier, **kw)
    assert out.response.status == 200
    quote_req = state.request.without("Attest-Quotes", "Attest-Signatures")
    from httpa2.attest import Quote

    q = Quote.from_item(sf.parse_list(state.request.get("Attest-Quotes"))[0])
    assert q.qudd == compute_qudd(canonical_transcript(attest_lines(quote_req)))
    assert client_finish(state, resp, verifier).keys == out.base.keys


def test_mhttpa_tampered_request_rejected(scfg, qservice, registry, verifier):
    cq = QService()
    scfg = replace(scfg, require_client_quotes=True)
    kw = dict(client={"client_qservice": cq}, service={"client_verifier": Verifier([cq.anchor()])})
    state, out, resp = run(ClientConfig(mhttpa=True), scfg, qservice, registry, verifier, mutate_req=_drop_first_suite, **kw)
    assert out.response.status == 403 and out.reason == "qudd-mismatch" and not registry.bases


def test_missing_client_quote_when_required(ccfg, scfg, qservice, registry, verifier):
    scfg = replace(scfg, require_client_quotes=True)
    state, out, resp = run(ccfg, scfg, qservice, registry, verifier, service={"client_verifier": Verifier([])})
    assert out.response.status == 403


def test_bad_signature(scfg, qservice, registry, verifier):
    ccfg = ClientConfig(sign_requests=True)
    req, state = client_begin(ccfg)
    sig = sf.parse_list(req.get("Attest-Signatures"))[0]
    forged = sf.Item(bytes(64), sig.params)
    req = req.without("Attest-Signatures").with_header("Attest-Signatures", sf.serialize_list([forged]))
    out = service_handle_aths(req, registry, scfg, qservice)
    assert out.response.status == 403 and out.reason == "bad-signature"


def test_service_secrets_delivered(ccfg, scfg, qservice, registry, verifier):
    scfg = replace(scfg, service_secrets=(b"svc-secret",))
    state, out, resp = run(ccfg, scfg, qservice, registry, verifier)
    assert b"svc-secret" not in serialize_message(resp)
    assert client_finish(state, resp, verifier).service_secrets == [b"svc-secret"]


def test_date_skew(ccfg, qservice, registry, verifier, clock):
    scfg = ServiceConfig(date_skew=30)
    req, state = client_begin(ccfg, clock=lambda: clock() - 100)
    out = service_handle_aths(req, registry, scfg, qservice, clock=clock)
    assert out.response.status == 400 and out.reason == "date-skew"


# -- registry -----------------------------------------------------------------

ID = Identity.from_code(b"svc")


def alloc(reg, creation="new", blocklist=(), now=0.0):
    return allocate_base(creation, {}, blocklist, reg, ID, now=now, max_age=100)


def test_new_ids_unique(registry):
    a, b = alloc(registry), alloc(registry)
    assert a.base_id != b.base_id and a.instance is not b.instance
    assert len(sf.b64url_decode(a.base_id)) == 16


def test_reuse_empty_pool_falls_back(registry):
    b = alloc(registry, "reuse")
    assert b.live and len(registry.instances) == 1 and not registry.reuse_pool


def test_cleanup_then_reuse(registry):
    a = alloc(registry)
    a.secret_store.append(b"s")
    a.recv_counter.value = 4
    registry.terminate(a, "cleanup")
    assert registry.reuse_pool == [a.instance] and a.instance.namespaces == {}
    b = alloc(registry, "reuse")
    assert b.instance is a.instance and b.base_id != a.base_id
    assert b.secret_store == [] and b.recv_counter.value == 0


def test_destroy(registry):
    a = alloc(registry)
    registry.terminate(a, "destroy")
    assert not registry.instances and not registry.reuse_pool
    with pytest.raises(AlreadyTerminated):
        registry.terminate(a, "destroy")


def test_keep_then_shared(registry):
    a = alloc(registry)
    a.secret_store.append(b"s")
    registry.terminate(a, "keep")
    assert a.state is BaseState.terminated and a.instance.shareable
    b = alloc(registry, "shared")
    assert b.instance is a.instance and b.secret_store == []


def test_shared_instance_cleanup_spares_other_clients(registry):
    a = alloc(registry, "shared")
    b = alloc(registry, "shared")
    assert a.instance is b.instance
    b.secret_store.append(b"b-secret")
    a.secret_store.append(b"a-secret")
    registry.terminate(a, "cleanup")
    assert b.secret_store == [b"b-secret"] and not registry.reuse_pool


def test_blocklist(registry):
    with pytest.raises(ResourceExhausted):
        alloc(registry, blocklist=[ID.measurement])
    with pytest.raises(ResourceExhausted):
        alloc(registry, blocklist=["isv-example"])
    assert not registry.bases


def test_cap():
    reg = Registry(max_instances=2)
    alloc(reg), alloc(reg)
    with pytest.raises(ResourceExhausted):
        alloc(reg)


def test_expiry(registry):
    a = alloc(registry)
    assert registry.lookup(a.base_id, 99.0) is a
    assert registry.lookup(a.base_id, 100.0) is None
    assert a.state is BaseState.expired and not registry.instances


def test_sweep(registry):
    alloc(registry), alloc(registry, now=50.0)
    assert registry.sweep(120.0) == 1 and len(registry.bases) == 1


def test_bad_creation(registry):
    with pytest.raises(ValueError):
        alloc(registry, "borrow")
