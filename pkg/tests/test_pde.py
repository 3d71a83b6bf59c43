import io
import math
import warnings

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from oracles import expm_ss
from purejump.errors import BadGrid, NonFiniteValue, OutOfRange, ValidationError
from purejump.model import validate_model
from purejump.pde import (AffineDriver, CustomDriver, ValueFunction, ZeroDriver, constant_extension,
                          contraction_weight, gronwall_factor, picard_iterate, residual_norm, solve_kolmogorov,
                          time_grid, truncate)


def test_zero_driver_constant_terminal(three_state):
    vf = solve_kolmogorov(three_state, ZeroDriver(), [2.5, 2.5, 2.5], 1e-2)
    np.testing.assert_allclose(vf.values, 2.5, atol=1e-13)


def test_unit_source_gives_time_to_go(two_state):
    vf = solve_kolmogorov(two_state, AffineDriver(2, a=1.0), [0.0, 0.0], 1e-3)
    np.testing.assert_allclose(vf.values, (1.0 - vf.times)[:, None] * np.ones(2), atol=1e-10)


def test_matrix_exponential_oracle(two_state):
    vf = solve_kolmogorov(two_state, ZeroDriver(), [1.0, 0.0], 1e-3)
    A = np.array([[-2.0, 2.0], [3.0, -3.0]])
    np.testing.assert_allclose(vf.values[0], expm_ss(A) @ [1.0, 0.0], atol=1e-8)
    # closed form: stationary part 3/5 plus decaying mode
    exact = np.array([0.6 + 0.4 * math.exp(-5), 0.6 - 0.6 * math.exp(-5)])
    np.testing.assert_allclose(vf.values[0], exact, atol=1e-8)


def test_piecewise_rates_oracle(three_state):
    g = np.array([1.0, -1.0, 0.5])
    vf = solve_kolmogorov(three_state, ZeroDriver(), g, 1e-3)
    Q0, Q1 = three_state.generator
    ref = expm_ss(Q0 * 0.8) @ expm_ss(Q1 * 1.2) @ g
    np.testing.assert_allclose(vf.values[0], ref, atol=1e-8)
    i = int(round(0.8 / 1e-3))
    np.testing.assert_allclose(vf.values[i], expm_ss(Q1 * 1.2) @ g, atol=1e-8)


def test_terminal_condition_exact(two_state, affine_benchmark):
    g = np.array([0.1, 0.7])
    vf = solve_kolmogorov(two_state, affine_benchmark, g, 1e-2)
    assert np.array_equal(vf.terminal, g)
    assert np.array_equal(vf.at(1.0), g)


def test_fourth_order_convergence(two_state, affine_benchmark):
    g = [1.0, 0.0]
    sols = [solve_kolmogorov(two_state, affine_benchmark, g, h) for h in (0.1, 0.05, 0.025)]
    d1 = np.abs(sols[0].values - sols[1].values[::2]).max()
    d2 = np.abs(sols[1].values - sols[2].values[::2]).max()
    assert d1 / d2 >= 8.0


def test_step_must_fit_grid(three_state):
    with pytest.raises(BadGrid):
        time_grid(three_state, 0.3)          # does not divide T = 2
    with pytest.raises(BadGrid):
        time_grid(three_state, 0.5)          # 0.8 is not a node
    times, cells = time_grid(three_state, 0.2)
    assert len(times) == 11 and list(cells) == [0] * 4 + [1] * 6


def test_large_step_warns(three_state):
    with pytest.warns(UserWarning, match="RK4"):
        solve_kolmogorov(three_state, ZeroDriver(), [0, 0, 0], 0.4)
    with warnings.catch_warnings():
        warnings.simplefilter("error")
        solve_kolmogorov(three_state, ZeroDriver(), [0, 0, 0], 0.02)


def test_nonfinite_raises(two_state):
    bad = CustomDriver(lambda t, x, y, z: math.inf, 0.0, 0.0)
    with pytest.raises(NonFiniteValue):
        solve_kolmogorov(two_state, bad, [0, 0], 0.1)
    blowup = CustomDriver(lambda t, x, y, z: y**3, 1.0, 1.0)
    with pytest.raises(NonFiniteValue):
        solve_kolmogorov(two_state, blowup, [1e30, 0.0], 0.1)


def test_driver_validation(two_state):
    with pytest.raises(ValidationError):
        CustomDriver(lambda *a: 0.0, -1.0, 0.0)
    with pytest.raises(ValidationError):
        AffineDriver(2, a=[1.0, 2.0, 3.0])
    no_rate = validate_model(2, 1.0, None, [[0, 1], [0, 0]])
    with pytest.raises(ValidationError):
        AffineDriver(2, c=[[0, 0], [1, 0]]).lipschitz(no_rate)
    with pytest.raises(ValidationError):
        AffineDriver(3).check(two_state)


def test_affine_lipschitz(two_state, affine_benchmark):
    L, Lp = affine_benchmark.lipschitz(two_state)
    assert Lp == 0.5
    assert L == pytest.approx(max(0.4 / math.sqrt(2.0), 0.6 / math.sqrt(3.0)))


def test_affine_evaluate_matches_formula(affine_benchmark):
    v = np.array([0.3, -1.2])
    out = affine_benchmark.evaluate(0.0, v, 0)
    for x in range(2):
        z = v - v[x]
        expect = affine_benchmark.a[0, x] + affine_benchmark.b[0, x] * v[x] + affine_benchmark.c[0, x] @ z
        assert out[x] == pytest.approx(expect)


def test_truncate_examples(two_state, affine_benchmark):
    drv, gn = truncate(ZeroDriver(), [5.0, -7.0], 3)
    np.testing.assert_array_equal(gn, [3.0, -3.0])
    same, g_same = truncate(affine_benchmark, [0.2, 0.1], 100, two_state)
    np.testing.assert_array_equal(g_same, [0.2, 0.1])
    v = np.array([0.4, -0.2])
    np.testing.assert_array_equal(same.evaluate(0.1, v, 0), affine_benchmark.evaluate(0.1, v, 0))
    assert same.lipschitz(two_state) == affine_benchmark.lipschitz(two_state)
    with pytest.raises(ValueError):
        truncate(ZeroDriver(), [0, 0], 0)


def test_truncation_convergence(two_state, affine_benchmark):
    g = np.array([3.0, -2.0])
    v = solve_kolmogorov(two_state, affine_benchmark, g, 1e-2)
    errs = []
    for level in (1, 2, 4, 8):
        drv, gn = truncate(affine_benchmark, g, level, two_state)
        errs.append(np.abs(solve_kolmogorov(two_state, drv, gn, 1e-2).values - v.values).max())
    assert all(b <= a for a, b in zip(errs, errs[1:]))
    assert errs[-1] <= 1e-8
    assert errs[0] > 0.1


def test_picard_fixed_point_for_constant(three_state):
    v0 = constant_extension(three_state, [2.0, 2.0, 2.0], 0.1)
    u, diffs = picard_iterate(three_state, ZeroDriver(), [2.0, 2.0, 2.0], v0, k_max=10)
    assert diffs == [0.0]
    np.testing.assert_array_equal(u.values, v0.values)


def test_picard_contracts_and_agrees(two_state, affine_benchmark):
    h = 1e-3
    g = [1.0, 0.0]
    beta, alpha = contraction_weight(two_state, affine_benchmark, h)
    assert 0 < alpha < 1
    u, diffs = picard_iterate(two_state, affine_benchmark, g, constant_extension(two_state, g, h),
                              k_max=100, tol=1e-12, beta=beta)
    floor = 64 * np.finfo(float).eps * max(1.0, np.abs(u.values).max())
    d = [x for x in diffs if x > floor]
    ratios = np.array(d[4:]) / np.array(d[3:-1])
    assert np.all(ratios <= alpha)
    rk = solve_kolmogorov(two_state, affine_benchmark, g, h)
    assert np.abs(u.values - rk.values).max() <= max(1e-12, 10 * h * h)


def test_picard_grid_checks(two_state):
    v0 = constant_extension(two_state, [0, 0], 0.1)
    with pytest.raises(BadGrid):
        picard_iterate(two_state, ZeroDriver(), [0, 0], ValueFunction(np.linspace(0, 0.5, 6), np.zeros((6, 2))))
    with pytest.raises(ValueError):
        picard_iterate(two_state, ZeroDriver(), [0, 0], v0, k_max=0)


def test_residual_exact_solution(two_state):
    times = np.linspace(0, 1, 101)
    v = ValueFunction(times, np.repeat((1 - times)[:, None], 2, axis=1))
    assert residual_norm(two_state, AffineDriver(2, a=1.0), [0, 0], v) <= 1e-10


def test_residual_order(two_state, affine_benchmark):
    g = [1.0, 0.0]
    hs = np.array([1e-2, 5e-3, 2.5e-3])
    res = np.array([residual_norm(two_state, affine_benchmark, g, solve_kolmogorov(two_state, affine_benchmark, g, h))
                    for h in hs])
    order = np.polyfit(np.log(hs), np.log(res), 1)[0]
    assert order >= 2 - 0.05


def test_residual_detects_perturbation(two_state):
    vf = solve_kolmogorov(two_state, ZeroDriver(), [1.0, 0.0], 1e-2)
    vals = vf.values.copy()
    vals[50, 0] += 1.0
    assert residual_norm(two_state, ZeroDriver(), [1.0, 0.0], ValueFunction(vf.times, vals)) >= 0.5


def test_continuous_dependence(three_state):
    drv = AffineDriver(3, a=[0.5, 0.0, -0.5], b=[0.2, -0.1, 0.3])
    rng = np.random.default_rng(3)
    factor = gronwall_factor(three_state, drv)
    for _ in range(5):
        g1, g2 = rng.normal(size=3), rng.normal(size=3)
        v1 = solve_kolmogorov(three_state, drv, g1, 1e-2)
        v2 = solve_kolmogorov(three_state, drv, g2, 1e-2)
        assert np.abs(v1.values - v2.values).max() <= factor * np.abs(g1 - g2).max()


def test_value_function_interpolation(two_state):
    times = np.linspace(0, 1, 11)
    vals = np.stack([times**2, 3 * times], axis=1)
    lin = ValueFunction(times, vals)
    assert lin(0.05, 1) == pytest.approx(0.15)
    assert lin(0.05, 0) == pytest.approx(0.5 * 0.01)
    slopes = np.stack([np.stack([2 * times[:-1], 3 + 0 * times[:-1]], 1),
                       np.stack([2 * times[1:], 3 + 0 * times[1:]], 1)], axis=1)
    herm = ValueFunction(times, vals, slopes)
    assert herm(0.05, 0) == pytest.approx(0.0025, abs=1e-15)          # cubic Hermite is exact for s^2
    np.testing.assert_allclose(herm.at(np.array([0.3, 0.35])), [[0.09, 0.9], [0.1225, 1.05]], atol=1e-14)
    assert herm.at(np.array([[0.1, 0.2]])).shape == (1, 2, 2)
    with pytest.raises(OutOfRange):
        lin(1.5, 0)


def test_value_csv(two_state):
    vf = solve_kolmogorov(two_state, ZeroDriver(), [1.0, 0.0], 0.05)
    buf = io.StringIO()
    vf.write_csv(buf)
    lines = buf.getvalue().splitlines()
    assert lines[0] == "t,state,value"
    assert len(lines) == 1 + 21 * 2
    t, x, v = lines[1].split(",")
    assert float(v) == vf.values[0, 0]


@settings(max_examples=25, deadline=None)
@given(arrays(float, (3, 3), elements=st.floats(0, 3)), arrays(float, 3, elements=st.floats(-5, 5)))
def test_linear_solution_matches_expm(nu, g):
    np.fill_diagonal(nu, 0.0)
    m = validate_model(3, 1.0, None, nu)
    vf = solve_kolmogorov(m, ZeroDriver(), g, 1e-2)
    np.testing.assert_allclose(vf.values[0], expm_ss(m.generator[0]) @ g, atol=1e-6 * max(1, np.abs(g).max()))
    assert np.array_equal(vf.terminal, g)
