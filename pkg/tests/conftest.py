import sys

import numpy as np
import pytest

from epod import snapshots as snap
from epod.coeff_models import D1
from epod.mesh_fem import build_mesh


@pytest.fixture(scope="session")
def mesh16():
    return build_mesh(16)


@pytest.fixture(scope="session")
def mesh32():
    return build_mesh(32)


@pytest.fixture(scope="session")
def ex1_set32():
    """Small ex1 snapshot set on the full mesh (n=32, N=60)."""
    return snap.generate("ex1", "trig_indicator_ex1", 32, 60, seed=3)


@pytest.fixture(scope="session")
def ex1_local32(ex1_set32):
    return snap.restrict(ex1_set32, D1)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)



def pytest_terminal_summary(terminalreporter):
    module = sys.modules.get("test_acceptance")
    lines = getattr(module, "RESULTS", None)
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in sorted(lines):
            terminalreporter.write_line(line)
