"""Service and client configuration."""

from __future__ import annotations

from dataclasses import dataclass, field

from .attest import AppraisalPolicy, Identity
from .crypto import SUITES

# Strongest first: the 256-bit key suite leads.
DEFAULT_SUITES = ("HTTPA-CHACHA20POLY1305-SHA256", "HTTPA-AES128GCM-SHA256")
DEFAULT_GROUPS = ("x25519", "secp256r1")
DEFAULT_METHODS = ("GET", "POST", "PUT", "DELETE", "OPTIONS", "ATTEST")
VERSION = "2"


@dataclass
class ServiceConfig:
    host: str = "127.0.0.1"
    port: int = 8080
    versions: tuple = (VERSION,)
    suites: tuple = tuple(SUITES)
    groups: tuple = DEFAULT_GROUPS
    identity: Identity = field(default_factory=lambda: Identity.from_code(b"httpa2 reference tservice"))
    # Quotes of collaborating instances collected by the upfront instance.
    extra_identities: tuple = ()
    allow_untrusted: bool = False
    base_max_age: int = 3600
    quote_max_age: int = 600
    max_instances: int = 64
    padding_block: int = 0
    preflight_max_age: int = 600
    allow_methods: tuple = DEFAULT_METHODS
    client_policy: AppraisalPolicy = field(default_factory=AppraisalPolicy)
    require_client_quotes: bool = False
    # Empty means any self-signed Attest-Signatures key is accepted.
    client_signature_keys: frozenset = frozenset()
    service_secrets: tuple = ()
    date_skew: int | None = None

    def __post_init__(self):
        if self.padding_block < 0:
            raise ValueError("padding_block must be >= 0")


@dataclass
class ClientConfig:
    host: str = "localhost"
    target: str = "/"
    versions: tuple = (VERSION,)
    suites: tuple = DEFAULT_SUITES
    groups: tuple = DEFAULT_GROUPS
    # Groups to send key shares for; None means the most preferred group.
    key_share_groups: tuple | None = None
    attestation: str = "direct"
    allow_untrusted: bool = False
    base_creation: str = "new"
    blocklist: tuple = ()
    policy: AppraisalPolicy = field(default_factory=AppraisalPolicy)
    mhttpa: bool = False
    client_identity: Identity = field(default_factory=lambda: Identity.from_code(b"httpa2 reference tclient", isv_id="isv-client"))
    sign_requests: bool = False
    strict_replay: bool = False
    preflight_headers: tuple = (
        "Attest-Versions",
        "Attest-Cipher-Suites",
        "Attest-Supported-Groups",
        "Attest-Key-Shares",
        "Attest-Random",
        "Attest-Policies",
        "Attest-Base-Creation",
        "Attest-Date",
    )

    def __post_init__(self):
        if not self.versions or not self.suites or not self.groups:
            raise ValueError("preference lists must be non-empty")
        if self.attestation not in ("direct", "indirect"):
            raise ValueError(f"unknown attestation mode {self.attestation!r}")
        if self.base_creation not in ("new", "reuse", "shared"):
            raise ValueError(f"unknown base creation method {self.base_creation!r}")
