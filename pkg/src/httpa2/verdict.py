"""Accept/reject outcome used by checks that report instead of raising."""

from __future__ import annotations

from dataclasses import dataclass


@dataclass(frozen=True)
class Verdict:
    ok: bool
    reason: str | None = None

    def __bool__(self) -> bool:
        return self.ok

    @classmethod
    def accept(cls) -> "Verdict":
        return ACCEPT

    @classmethod
    def reject(cls, reason: str) -> "Verdict":
        return cls(False, reason)

    def __str__(self) -> str:
        return "accept" if self.ok else f"reject({self.reason})"


ACCEPT = Verdict(True)
