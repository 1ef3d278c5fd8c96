"""Exhaustive single-mutation sweep over a scripted four-message transaction.

A clean run is recorded through one transparent middlebox; every element
of every captured message then yields one or more single-change tamper
rules. Each rule is replayed in a fresh run and the security checks that
fired on either endpoint are counted.
"""

from __future__ import annotations

from dataclasses import dataclass, field

from .harness import Scenario, run_scenario
from .wire import classify_request, is_attest

SECRET = "sweep-secret-value-0001"
PREFIX = "PUBLIC-PREFIX|"
REGION = "confidential-region-data"
SUFFIX = "|PUBLIC-SUFFIX"
BODY = PREFIX + REGION + SUFFIX

TRANSACTION = [
    {"op": "handshake"},
    {"op": "provision", "secrets": [SECRET]},
    {
        "op": "trr",
        "target": "/echo",
        "body": BODY,
        "headers": [["X-Note", "first"]],
        "regions": [{"off": len(PREFIX), "len": len(REGION)}],
    },
    {
        "op": "trr",
        "target": "/echo",
        "body": BODY,
        "headers": [["X-Note", "second"]],
        "regions": [{"off": len(PREFIX), "len": len(REGION), "kind": "signed"}],
    },
]


@dataclass
class Mutation:
    label: str
    rule: dict
    protected: bool


@dataclass
class MutationResult:
    mutation: Mutation
    checks: list
    steps: list = field(repr=False, default_factory=list)

    @property
    def ok(self) -> bool:
        if self.mutation.protected:
            return len(self.checks) == 1
        return not self.checks


def transaction_scenario(rules=(), seed: int = 7) -> Scenario:
    return Scenario(
        name="sweep",
        script=TRANSACTION,
        expect=[{} for _ in TRANSACTION],
        seed=seed,
        hops=1,
        rules=[{"hop": 0, **r} for r in rules],
    )


def checks_fired(steps: list) -> list[str]:
    """Distinct rejections raised by either endpoint, in order."""
    out = []
    for s in steps:
        out += s["service_reasons"]
        if s["verdict"] == "reject" and s["client_reason"] not in (None, "refused"):
            out.append(s["client_reason"])
    return out


def _captured(seed: int):
    """(direction, class, nth, message) for every message of a clean run."""
    from .harness import _Run

    run = _Run(transaction_scenario(seed=seed), 0, False)
    for i, step in enumerate(TRANSACTION):
        from .harness import _run_step

        _run_step(run, i, step)
    counts: dict = {}
    out = []
    cls = None
    for entry in run.logs[0].entries:
        if entry.direction == "request":
            cls = classify_request(entry.message).value
        key = (entry.direction, cls)
        counts[key] = counts.get(key, 0) + 1
        out.append((entry.direction, cls, counts[key], entry.message))
    run.close()
    return out


def generate_mutations(seed: int = 7) -> list[Mutation]:
    muts: list[Mutation] = []
    for direction, cls, nth, msg in _captured(seed):
        base = {"direction": direction, "class": cls, "nth": nth}
        where = f"{cls} {direction} #{nth}"
        for section, lines in (("header", msg.headers), ("trailer", msg.trailers)):
            attest_names = [n for n, _ in lines if is_attest(n)]
            for name, _ in lines:
                sel = {**base, "field": name, "section": section}
                if not is_attest(name):
                    muts.append(Mutation(f"{where}: modify {name}", {**sel, "action": "modify", "value": "tampered"}, False))
                    continue
                for action in ("modify", "drop", "duplicate"):
                    muts.append(Mutation(f"{where}: {action} {name}", {**sel, "action": action}, True))
                if len(attest_names) > 1:
                    muts.append(Mutation(f"{where}: reorder {name}", {**sel, "action": "reorder"}, True))
        muts.append(Mutation(f"{where}: insert Attest-Foo", {**base, "action": "insert", "field": "Attest-Foo"}, True))
        if cls == "TrR" and msg.body:
            muts.append(Mutation(f"{where}: flip region byte", {**base, "action": "flip-body", "offset": len(PREFIX) + 1}, True))
            muts.append(Mutation(f"{where}: flip prefix byte", {**base, "action": "flip-body", "offset": 1}, False))
            muts.append(Mutation(f"{where}: flip suffix byte", {**base, "action": "flip-body", "offset": len(msg.body) - 2}, False))
    return muts


def run_mutation(m: Mutation, seed: int = 7) -> MutationResult:
    report = run_scenario(transaction_scenario([m.rule], seed))
    return MutationResult(m, checks_fired(report.steps), report.steps)


def run_sweep(seed: int = 7) -> list[MutationResult]:
    return [run_mutation(m, seed) for m in generate_mutations(seed)]
