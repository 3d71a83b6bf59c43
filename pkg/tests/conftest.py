import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))

from purejump.model import validate_model
from purejump.pde import AffineDriver
from purejump.problem import fixture_path, load_spec


@pytest.fixture(scope="session")
def two_state():
    return validate_model(2, 1.0, None, [[0.0, 2.0], [3.0, 0.0]])


@pytest.fixture(scope="session")
def affine_benchmark():
    """Nonlinear-in-(y, z) driver on the two-state model."""
    return AffineDriver(2, a=[1.0, -0.5], b=[-0.5, 0.3], c=[[0.0, 0.4], [-0.6, 0.0]])


@pytest.fixture(scope="session")
def admission():
    spec = load_spec(fixture_path("admission.json"))
    return spec.model, spec.control


@pytest.fixture(scope="session")
def three_state():
    """Three states, two cells, one absorbing state in the second cell."""
    nu = [
        [[0.0, 1.0, 0.5], [2.0, 0.0, 1.0], [0.5, 0.5, 0.0]],
        [[0.0, 0.0, 2.0], [1.0, 0.0, 0.0], [0.0, 0.0, 0.0]],
    ]
    return validate_model(3, 2.0, [0.0, 0.8, 2.0], nu)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def pytest_terminal_summary(terminalreporter):
    mod = sys.modules.get("test_acceptance")
    results = getattr(mod, "RESULTS", None)
    if results:
        terminalreporter.section("acceptance criteria")
        for key in sorted(results, key=lambda k: int(k[1:])):
            terminalreporter.write_line(results[key])
