import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))

from cropmatch.imagecore import synthetic_image  # noqa: E402


def image_pair(seed, side=64):
    """Clean and target images used throughout the attack tests."""
    rng = np.random.default_rng(1000 + seed)
    return synthetic_image(rng, side), synthetic_image(rng, side)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture(autouse=True)
def _no_network(monkeypatch):
    """Any attempt to open a socket fails the test: the suite must be hermetic."""
    import socket

    def guard(*args, **kwargs):
        raise RuntimeError("network access attempted during tests")

    monkeypatch.setattr(socket.socket, "connect", guard)
    monkeypatch.setattr(socket, "create_connection", guard)


def pytest_terminal_summary(terminalreporter):
    mod = sys.modules.get("test_acceptance")
    if mod is None or not getattr(mod, "REPORT", None):
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(mod.REPORT):
        terminalreporter.write_line(mod.REPORT[n])
