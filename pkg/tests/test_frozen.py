"""Regression values recorded from a reviewed run.

Deterministic numerics are compared at 1e-12 (relative); Monte Carlo values
depend on the seeded streams and must reproduce to the last few ulps.
"""

import numpy as np
import pytest

from purejump.bsde import energy_identity_gap
from purejump.control import cost_direct, cost_reweighted, solve_hjb
from purejump.pde import AffineDriver, ZeroDriver, solve_kolmogorov
from purejump.problem import fixture_path, load_spec
from purejump.simulate import simulate_batch

RTOL = 1e-12


@pytest.fixture(scope="module")
def specs():
    return load_spec(fixture_path("two_state.json")), load_spec(fixture_path("admission.json"))


def test_linear_solve(specs):
    two, _ = specs
    vf = solve_kolmogorov(two.model, ZeroDriver(), [1, 0], 1e-2)
    np.testing.assert_allclose(vf.values[0], [0.6026951795313841, 0.5959572307029236], rtol=RTOL)
    assert vf(0.505, 1) == pytest.approx(0.5495021998818016, rel=RTOL)


def test_hjb(specs):
    _, adm = specs
    vf, pol = solve_hjb(adm.model, adm.control, 1e-3)
    np.testing.assert_allclose(vf.values[0], [0.8468472794316926, 1.3431731549827794, 2.439924814694807],
                               rtol=RTOL)
    assert pol.table.tolist() == [[1, 1, 1], [0, 0, 0], [1, 1, 1], [0, 1, 0]]


def test_simulation_stream(specs):
    two, _ = specs
    b = simulate_batch(two.model, 0.0, 0, 1000, 1)
    assert int(b.n_jumps.sum()) == 2277
    np.testing.assert_allclose(b.jump_time[:3], [0.0185380993435268, 0.3693403251317583, 0.1767509453180596],
                               rtol=RTOL)
    assert b.jump_to[:3].tolist() == [1, 0, 1]


def test_policy_costs(specs):
    _, adm = specs
    _, pol = solve_hjb(adm.model, adm.control, 1e-3)
    d = cost_direct(adm.model, adm.control, pol, 0.0, 0, 2000, 7)
    w = cost_reweighted(adm.model, adm.control, pol, 0.0, 0, 2000, 7)
    np.testing.assert_allclose(d, (0.841522900631924, 0.018062284874202007), rtol=1e-10)
    np.testing.assert_allclose(w, (0.8408543085159739, 0.0568589951869289), rtol=1e-10)


def test_energy_estimate(specs):
    two, _ = specs
    vf = solve_kolmogorov(two.model, AffineDriver(2, a=[0.5, -1]), [1, -0.5], 1e-2)
    e = energy_identity_gap(two.model, vf, [0.5, -1], 0.0, 0, 2.0, 1000, 3)
    np.testing.assert_allclose([e.lhs, e.rhs, e.gap, e.se],
                               [6.641050056505688, 6.5826703111655664, 0.058379745340121296, 0.09192930549518188],
                               rtol=1e-10)
