import logging

import pytest

from httpa2.attest import QService, Verifier
from httpa2.config import ClientConfig, ServiceConfig
from httpa2.handshake import Registry
from httpa2.harness import ManualClock, seeded_rng


@pytest.fixture(autouse=True)
def _quiet_logs():
    logging.getLogger("httpa2").setLevel(logging.ERROR)
    yield


@pytest.fixture
def clock():
    return ManualClock()


@pytest.fixture
def qservice():
    return QService(rng=seeded_rng(1, "q"))


@pytest.fixture
def verifier(qservice):
    return Verifier([qservice.anchor()])


@pytest.fixture
def registry():
    return Registry(max_instances=8, rng=seeded_rng(1, "reg"))


@pytest.fixture
def scfg():
    return ServiceConfig()


@pytest.fixture
def ccfg():
    return ClientConfig()
