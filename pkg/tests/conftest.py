import socket
from pathlib import Path

import pytest

from hoiagent.core import BBox, HOITriplet
from hoiagent.vocab import load_vocabulary

FIXTURES = Path(__file__).parent / "fixtures"

# criterion number -> (passed, description, detail); filled by test_acceptance
ACCEPTANCE: dict[int, tuple[bool, str, str]] = {}


def tri(verb, obj, h, o, score=None):
    return HOITriplet(verb, obj, BBox(*h), BBox(*o), score)


@pytest.fixture
def fixtures():
    return FIXTURES


@pytest.fixture
def vocab():
    return load_vocabulary(FIXTURES / "vocab_small.yaml")


@pytest.fixture(autouse=True)
def no_network(monkeypatch):
    """The suite must run offline; any outbound connection is a test bug."""
    real_connect = socket.socket.connect

    def guarded(self, address):
        if self.family == getattr(socket, "AF_UNIX", None):
            return real_connect(self, address)
        raise RuntimeError(f"network access attempted: {address!r}")

    monkeypatch.setattr(socket.socket, "connect", guarded)


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(ACCEPTANCE):
        ok, desc, detail = ACCEPTANCE[n]
        terminalreporter.write_line(f"criterion {n:2d}: {'PASS' if ok else 'FAIL'}  {desc}  [{detail}]")
