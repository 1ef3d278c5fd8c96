"""Attested, end-to-end protected HTTP/1.1 transactions.

Reference client and trusted-service endpoints, a mock attestation
infrastructure and a tampering middlebox harness.
"""

from .errors import HttpaError, ProtocolReject
from .verdict import Verdict

__version__ = "0.1.0"

__all__ = ["HttpaError", "ProtocolReject", "Verdict", "__version__"]
