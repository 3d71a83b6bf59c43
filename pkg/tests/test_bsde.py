import math

import numpy as np
import pytest

from purejump.bsde import (NodeIntegrand, a_priori_terms, bsde_residual, energy_identity_gap,
                           kolmogorov_integrand, verify_ito, yz_from_value)
from purejump.pde import AffineDriver, ValueFunction, ZeroDriver, solve_kolmogorov
from purejump.simulate import MarkedPath, path_generators, simulate_batch, simulate_path


def _path(t0, x0, times, marks, T=1.0):
    return MarkedPath(t0, x0, np.array(times, float), np.array(marks, int), T)


def _paths(model, n, seed, t=0.0, x=0):
    return [simulate_path(model, t, x, rng) for rng in path_generators(seed, n)]


def test_yz_on_fixed_path(two_state):
    vf = solve_kolmogorov(two_state, ZeroDriver(), [1.0, 0.0], 1e-2)
    path = _path(0.0, 0, [0.3, 0.7], [1, 0])
    yz = yz_from_value(vf, path)
    assert yz.Y(0.3) == pytest.approx(vf(0.3, 1))           # right-continuous
    assert yz.Y_left(0.3) == pytest.approx(vf(0.3, 0))      # left limit
    assert yz.Z(0.5, 0) == pytest.approx(vf(0.5, 0) - vf(0.5, 1))
    assert yz.Y(1.0) == 1.0 * 0 + vf.terminal[0]
    assert 0.3 in yz.times and 0.7 in yz.times and len(yz.times) == 101
    np.testing.assert_allclose(yz.Y_values, yz.Y(yz.times))


def test_z_vanishes_on_diagonal(two_state):
    vf = solve_kolmogorov(two_state, ZeroDriver(), [1.0, 0.0], 1e-2)
    path = _path(0.0, 1, [0.25], [0])
    for s in (0.1, 0.25, 0.6):
        assert yz_from_value(vf, path).Z(s, path.state_before(s)) == 0.0


def test_jump_part_telescopes(two_state):
    vf = solve_kolmogorov(two_state, ZeroDriver(), [1.0, 0.0], 1e-2)
    path = _path(0.0, 0, [0.2, 0.5, 0.9], [1, 0, 1])
    yz = yz_from_value(vf, path)
    H = yz.integrand()
    jump_sum = sum(H(s, path.state_at(s), path.state_before(s)) for s in path.jump_times)
    assert jump_sum == pytest.approx(sum(yz.Y(s) - yz.Y_left(s) for s in path.jump_times), abs=1e-15)


def test_node_integrand_exact_for_polynomials(two_state):
    times = np.linspace(0, 1, 11)
    vf = ValueFunction(times, np.zeros((11, 2)))
    tab = NodeIntegrand(two_state, vf, lambda t, V, k: np.stack([t**3, 2 * t], axis=1))
    assert tab.integral(0.0, 1.0, 0) == pytest.approx(0.25, abs=1e-14)
    assert tab.integral(0.13, 0.77, 0) == pytest.approx((0.77**4 - 0.13**4) / 4, abs=1e-14)
    assert tab.integral(0.13, 0.77, 1) == pytest.approx(0.77**2 - 0.13**2, abs=1e-14)
    np.testing.assert_allclose(tab.upto_many(np.array([0.5, 0.55]), np.array([1, 1])), [0.25, 0.3025])


def test_residual_small_for_solver_output(two_state, affine_benchmark):
    vf = solve_kolmogorov(two_state, affine_benchmark, [1.0, 0.0], 1e-3)
    table = NodeIntegrand(two_state, vf, kolmogorov_integrand(two_state, affine_benchmark))
    worst = max(bsde_residual(two_state, affine_benchmark, vf, p, table=table) for p in _paths(two_state, 20, 4))
    assert worst <= 1e-6


def test_residual_no_jumps(three_state):
    vf = solve_kolmogorov(three_state, ZeroDriver(), [0.0, 0.0, 1.0], 1e-2)
    path = _path(1.0, 2, [], [], T=2.0)          # absorbing in the second cell
    assert bsde_residual(three_state, ZeroDriver(), vf, path) <= 1e-12


def test_residual_detects_wrong_value(two_state, affine_benchmark):
    vf = solve_kolmogorov(two_state, affine_benchmark, [1.0, 0.0], 1e-2)
    wrong = ValueFunction(vf.times, vf.values + 1.0)
    path = _paths(two_state, 1, 2)[0]
    assert bsde_residual(two_state, affine_benchmark, wrong, path, g=vf.terminal) >= 0.5


def test_residual_decreases_with_step(two_state, affine_benchmark):
    paths = _paths(two_state, 100, 9)

    def mean_res(h):
        vf = solve_kolmogorov(two_state, affine_benchmark, [1.0, 0.0], h)
        table = NodeIntegrand(two_state, vf, kolmogorov_integrand(two_state, affine_benchmark))
        return np.mean([bsde_residual(two_state, affine_benchmark, vf, p, table=table) for p in paths])

    assert mean_res(0.1) / mean_res(0.05) >= 3.5


@pytest.mark.parametrize("kind", ["constant", "time", "product"])
def test_ito_formula(two_state, kind):
    times = np.linspace(0, 1, 101)
    w = np.array([1.0, -2.0])
    vals = {
        "constant": np.full((101, 2), 3.0),
        "time": np.repeat(times[:, None], 2, axis=1),
        "product": times[:, None] ** 2 * w,
    }[kind]
    vf = ValueFunction(times, vals)
    for p in _paths(two_state, 20, 5):
        assert verify_ito(two_state, vf, p) <= 1e-10


def test_ito_from_midway_start(three_state):
    vf = solve_kolmogorov(three_state, ZeroDriver(), [1.0, 2.0, 0.0], 1e-2)
    for rng in path_generators(6, 10):
        assert verify_ito(three_state, vf, simulate_path(three_state, 0.55, 1, rng)) <= 1e-10


def test_energy_zero_case_exact(two_state):
    # v = 0 with zero source: both sides vanish on every path
    vf = solve_kolmogorov(two_state, ZeroDriver(), [0.0, 0.0], 1e-2)
    e = energy_identity_gap(two_state, vf, 0.0, 0.0, 0, 1.0, 200, seed=1)
    assert e.lhs == 0.0 and e.rhs == 0.0 and e.gap == 0.0


def test_energy_constant_case(two_state):
    # v = c, no source: lhs = e^{bt} c^2 + beta c^2 (e^{bT} - e^{bt})/beta = e^{bT} c^2 = rhs pathwise
    vf = solve_kolmogorov(two_state, ZeroDriver(), [2.0, 2.0], 1e-2)
    e = energy_identity_gap(two_state, vf, 0.0, 0.0, 1, 1.5, 100, seed=2)
    assert e.gap == pytest.approx(0.0, abs=1e-9) and e.se <= 1e-9


@pytest.mark.parametrize("beta", [0.0, 2.0])
def test_energy_identity_mc(two_state, beta):
    src = np.array([0.5, -1.0])
    vf = solve_kolmogorov(two_state, AffineDriver(2, a=src), [1.0, -0.5], 1e-3)
    e = energy_identity_gap(two_state, vf, src, 0.0, 0, beta, 4000, seed=11)
    assert abs(e.gap) <= 4 * e.se


def test_a_priori_estimate(three_state):
    s1, s2 = np.array([0.3, 0.0, -0.2]), np.array([0.1, 0.4, 0.0])
    g1, g2 = np.array([1.0, 0.0, 0.5]), np.array([0.0, 0.2, 0.5])
    v1 = solve_kolmogorov(three_state, AffineDriver(3, a=s1), g1, 1e-2)
    v2 = solve_kolmogorov(three_state, AffineDriver(3, a=s2), g2, 1e-2)
    r = a_priori_terms(three_state, v1, v2, s1, s2, 0.0, 0, 2000, seed=3)
    assert r.lhs > 0 and r.rhs > 0
    # with T = 2 the constant exp(T) (1 + T) covers the estimate comfortably
    assert r.lhs <= math.exp(2.0) * 3.0 * r.rhs
    same = a_priori_terms(three_state, v1, v1, s1, s1, 0.0, 0, 50, seed=3)
    assert same.lhs == 0.0 and same.rhs == 0.0


def test_mc_results_are_seed_deterministic(two_state):
    vf = solve_kolmogorov(two_state, AffineDriver(2, a=1.0), [0.0, 1.0], 1e-2)
    a = energy_identity_gap(two_state, vf, 1.0, 0.0, 0, 1.0, 300, seed=5)
    b = energy_identity_gap(two_state, vf, 1.0, 0.0, 0, 1.0, 300, seed=5)
    assert a == b
    batch = simulate_batch(two_state, 0.0, 0, 300, 5)
    assert batch.n_paths == 300
