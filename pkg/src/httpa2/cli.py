"""Command line: serve, client, proxy and scenario runs.

Exit codes: 0 pass, 1 scenario or protocol failure, 2 environment failure.
"""

from __future__ import annotations

import argparse
import base64
import json
import logging
import os
import sys
import threading
from pathlib import Path

from .attest import QService, TrustAnchor, Verifier, QUOTE_TYPE
from .config import ClientConfig, ServiceConfig
from .errors import EnvironmentFailure, HttpaError, UpstreamUnreachable
from .harness import Scenario, bundled_dir, run_all, run_scenario, seeded_rng
from .middlebox import CaptureLog, Middlebox, TamperRule
from .stack import Client, TcpTransport, TService, serve_tcp

EXIT_OK, EXIT_FAIL, EXIT_ENV = 0, 1, 2

DEFAULT_SCRIPT = [
    {"op": "preflight"},
    {"op": "handshake"},
    {"op": "trr", "target": "/echo", "body": "hello", "regions": [{"off": 0, "len": 5}]},
]


def _hostport(text: str) -> tuple[str, int]:
    host, _, port = text.rpartition(":")
    return host or "127.0.0.1", int(port)


def _wait_forever(server) -> int:
    try:
        threading.Event().wait()
    except KeyboardInterrupt:
        pass
    finally:
        server.shutdown()
    return EXIT_OK


def cmd_serve(args) -> int:
    rng = seeded_rng(args.seed, "service") if args.seed is not None else os.urandom
    qservice = QService(seed=bytes.fromhex(args.quote_key) if args.quote_key else None, rng=rng)
    cfg = ServiceConfig(host=args.host, port=args.port, allow_untrusted=args.allow_untrusted, padding_block=args.padding)
    service = TService(cfg, qservice, rng=rng)
    server = serve_tcp(service.handle_bytes, args.host, args.port)
    host, port = server.server_address[:2]
    print(f"listening on {host}:{port}", flush=True)
    print(f"trust anchor {qservice.anchor().public_key.hex()}", flush=True)
    return _wait_forever(server)


def cmd_client(args) -> int:
    host, port = _hostport(args.connect)
    script = json.loads(Path(args.script).read_text()) if args.script else DEFAULT_SCRIPT
    anchor = TrustAnchor(QUOTE_TYPE, bytes.fromhex(args.anchor))
    cfg = ClientConfig(host=host, strict_replay=args.strict)
    client = Client(cfg, TcpTransport(host, port), Verifier([anchor]))
    log = client.run(script)
    for step in log.steps:
        print(f"{step.index:>2} {step.op:<10} {step.verdict:<8} {step.reason or ''}")
    if args.transcript:
        record = log.as_dict()
        record["messages"] = [{"direction": d, "b64": base64.b64encode(m).decode()} for d, m in log.messages]
        Path(args.transcript).write_text(json.dumps(record, indent=2))
    return EXIT_OK if all(s.verdict == "accept" for s in log.steps) else EXIT_FAIL


def cmd_proxy(args) -> int:
    rules = [TamperRule.from_dict(r) for r in json.loads(Path(args.rules).read_text())] if args.rules else []
    log = CaptureLog()
    host, port = _hostport(args.upstream)
    mb = Middlebox(TcpTransport(host, port), rules, log)
    lhost, lport = _hostport(args.listen)
    server = serve_tcp(mb, lhost, lport)
    print(f"proxy {server.server_address[0]}:{server.server_address[1]} -> {host}:{port}", flush=True)
    try:
        return _wait_forever(server)
    finally:
        if args.capture:
            entries = [
                {"direction": e.direction, "raw": base64.b64encode(e.raw).decode(), "forwarded": base64.b64encode(e.forwarded).decode()}
                for e in log.entries
            ]
            Path(args.capture).write_text(json.dumps(entries, indent=2))


def cmd_scenario_run(args) -> int:
    report = run_scenario(Scenario.load(args.file), extra_hops=args.extra_hops, tcp=args.tcp)
    print(report.to_json() if args.json else report.summary())
    return EXIT_OK if report.passed else EXIT_FAIL


def cmd_scenario_run_all(args) -> int:
    directory = args.dir or bundled_dir()
    if not Path(directory).is_dir():
        raise EnvironmentFailure(f"not a directory: {directory}")
    summary = run_all(directory, extra_hops=args.extra_hops, tcp=args.tcp)
    if args.json:
        print(json.dumps([json.loads(r.to_json()) for r in summary.reports], indent=2))
    else:
        print(summary.text())
    return EXIT_OK if summary.passed else EXIT_FAIL


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="httpa2", description="Attested HTTP reference endpoints and test harness")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("serve", help="run a trusted service")
    s.add_argument("--host", default="127.0.0.1")
    s.add_argument("--port", type=int, default=8080)
    s.add_argument("--seed", type=int)
    s.add_argument("--quote-key", help="hex Ed25519 seed for the quoting service")
    s.add_argument("--allow-untrusted", action="store_true")
    s.add_argument("--padding", type=int, default=0)
    s.set_defaults(func=cmd_serve)

    c = sub.add_parser("client", help="run a client script against a service")
    c.add_argument("--connect", default="127.0.0.1:8080")
    c.add_argument("--anchor", required=True, help="hex public key of the service's quoting service")
    c.add_argument("--script", help="JSON list of steps")
    c.add_argument("--strict", action="store_true", help="request strict replay checking")
    c.add_argument("--transcript", help="write a JSON transcript log here")
    c.set_defaults(func=cmd_client)

    x = sub.add_parser("proxy", help="run a tampering L7 middlebox")
    x.add_argument("--listen", default="127.0.0.1:8081")
    x.add_argument("--upstream", default="127.0.0.1:8080")
    x.add_argument("--rules", help="JSON list of tamper rules")
    x.add_argument("--capture", help="write the capture log here on exit")
    x.set_defaults(func=cmd_proxy)

    sc = sub.add_parser("scenario", help="run bundled or custom scenarios")
    ssub = sc.add_subparsers(dest="scenario_command", required=True)
    for name, func in (("run", cmd_scenario_run), ("run-all", cmd_scenario_run_all)):
        q = ssub.add_parser(name)
        if name == "run":
            q.add_argument("file")
        else:
            q.add_argument("dir", nargs="?")
        q.add_argument("--extra-hops", type=int, default=0, help="add transparent middleboxes")
        q.add_argument("--tcp", action="store_true", help="run every hop over loopback TCP")
        q.add_argument("--json", action="store_true")
        q.set_defaults(func=func)
    return p


def main(argv=None) -> int:
    logging.basicConfig(level=os.environ.get("HTTPA2_LOG", "WARNING").upper(), format="%(levelname)s %(name)s: %(message)s")
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (EnvironmentFailure, UpstreamUnreachable, OSError) as exc:
        print(f"environment failure: {exc}", file=sys.stderr)
        return EXIT_ENV
    except HttpaError as exc:
        print(f"failed: {exc}", file=sys.stderr)
        return EXIT_FAIL


if __name__ == "__main__":
    sys.exit(main())
