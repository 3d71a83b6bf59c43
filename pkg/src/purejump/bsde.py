"""Pathwise and Monte Carlo checks of the backward equation solved by ``v``.

Along a path the solution pair is read off the value function:
``Y_s = v(s, X_s)`` and ``Z_s(y) = v(s, y) - v(s, X_{s-})``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable

import numpy as np

from .model import Model
from .pde import Driver, ValueFunction, time_grid
from .simulate import MarkedPath, PieceBatch, mean_and_se, simulate_batch


@dataclass(frozen=True, eq=False)
class PathYZ:
    vf: ValueFunction
    path: MarkedPath
    times: np.ndarray
    Y_values: np.ndarray

    def Y(self, s) -> np.ndarray | float:
        s = np.asarray(s, dtype=float)
        x = self.path.states[np.searchsorted(self.path.jump_times, s, side="right")]
        return self.vf(s, x)

    def Y_left(self, s) -> np.ndarray | float:
        s = np.asarray(s, dtype=float)
        x = self.path.states[np.searchsorted(self.path.jump_times, s, side="left")]
        return self.vf(s, x)

    def Z(self, s, y) -> np.ndarray | float:
        return self.vf(s, y) - self.Y_left(s)

    def integrand(self) -> Callable:
        """``H(s, y, x) = v(s, y) - v(s, x)`` in the form :func:`stochastic_integral` expects."""
        vf = self.vf
        return lambda s, y, x: vf(s, y) - vf(s, x)


def yz_from_value(vf: ValueFunction, path: MarkedPath) -> PathYZ:
    """Materialize ``Y`` at grid nodes in ``[t, T]`` and at jump times."""
    nodes = vf.times[vf.times >= path.start_time - 1e-12]
    times = np.unique(np.concatenate(([path.start_time], nodes, path.jump_times)))
    times = times[np.concatenate(([True], np.diff(times) > 1e-12))]
    yz = PathYZ(vf, path, times, np.empty(0))
    return PathYZ(vf, path, times, np.asarray(yz.Y(times), dtype=float))


class NodeIntegrand:
    """Cumulative Simpson tables of a state-indexed integrand ``F(r, x)``.

    ``F(t, V, cell)`` receives times ``t`` (shape ``(m,)``), value rows ``V``
    (``(m, n)``) and the rate cell of the step, and returns ``(m, n)``.  At a
    breakpoint node the two adjacent steps each see their own cell.  Partial
    steps (ending at a jump time) use Simpson on the partial interval.
    """

    def __init__(self, model: Model, vf: ValueFunction, F):
        self.model, self.vf, self.F = model, vf, F
        times, seg_cell = time_grid(model, vf.step)
        self.times, self.seg_cell = times, seg_cell
        N = len(times) - 1
        V = vf.values
        mids = 0.5 * (times[:-1] + times[1:])
        Vm = vf.at(mids)
        FL = np.empty((N, model.n))
        FM = np.empty((N, model.n))
        FR = np.empty((N, model.n))
        for k in np.unique(seg_cell):
            idx = np.nonzero(seg_cell == k)[0]
            FL[idx] = F(times[idx], V[idx], int(k))
            FM[idx] = F(mids[idx], Vm[idx], int(k))
            FR[idx] = F(times[idx + 1], V[idx + 1], int(k))
        self.FL = FL
        self.cum = np.concatenate((np.zeros((1, model.n)),
                                   np.cumsum(np.diff(times)[:, None] * (FL + 4 * FM + FR) / 6, axis=0)))

    def _segment(self, s: float) -> int:
        j = int(math.floor(s / self.vf.step + 1e-9))
        return min(max(j, 0), len(self.times) - 2)

    def upto(self, s: float, x: int) -> float:
        """Integral of ``F(., x)`` from 0 to ``s``."""
        return float(self.upto_many(np.array([s]), np.array([x]))[0])

    def upto_many(self, s, x) -> np.ndarray:
        """Vectorized :meth:`upto` over matching arrays of times and states."""
        s = np.asarray(s, dtype=float)
        x = np.asarray(x, dtype=int)
        j = np.clip(np.floor(s / self.vf.step + 1e-9).astype(int), 0, len(self.times) - 2)
        d = s - self.times[j]
        out = self.cum[j, x].copy()
        part = np.abs(d) > 1e-15
        if not part.any():
            return out
        j, d, x, idx = j[part], d[part], x[part], np.nonzero(part)[0]
        mid = self._points(self.times[j] + 0.5 * d, j, x)
        end = self._points(s[idx], j, x)
        out[idx] += d * (self.FL[j, x] + 4 * mid + end) / 6
        return out

    def _points(self, s, j, x) -> np.ndarray:
        V = self.vf.at(s)
        out = np.empty(len(s))
        cells = self.seg_cell[j]
        for k in np.unique(cells):
            sel = cells == k
            out[sel] = self.F(s[sel], V[sel], int(k))[np.arange(sel.sum()), x[sel]]
        return out

    def integral(self, a: float, b: float, x: int) -> float:
        return self.upto(b, x) - self.upto(a, x)

    def path_integrals(self, pieces: PieceBatch) -> np.ndarray:
        """Integral of ``F(., X_r)`` over each path's interval; shape ``(n_paths,)``."""
        return pieces.total(self.upto_many(pieces.b, pieces.x) - self.upto_many(pieces.a, pieces.x))


def kolmogorov_integrand(model: Model, driver: Driver):
    """``(L_r v)(x) + f(r, x, v(r, x), v(r, .) - v(r, x))`` for whole blocks of rows."""
    G = model.generator

    def F(t, V, k):
        out = V @ G[k].T
        for i in range(len(V)):
            out[i] += driver.evaluate(float(t[i]), V[i], k)
        return out

    return F


def bsde_residual(model: Model, driver: Driver, vf: ValueFunction, path: MarkedPath,
                  g=None, table: NodeIntegrand | None = None) -> float:
    """Max over grid nodes ``s`` in ``[t, T]`` of the defect

        Y_s + int_s^T int Z q(dr dy) - g(X_T) - int_s^T f(r, X_r, Y_r, Z_r) dr.

    The jump part of the stochastic integral telescopes with ``Y``; the
    compensator and ``f`` terms are integrated together by Simpson's rule on
    the value grid plus jump times.  Pass a prebuilt ``table`` to reuse it
    across paths.
    """
    g = vf.terminal if g is None else np.asarray(g, dtype=float)
    if table is None:
        table = NodeIntegrand(model, vf, kolmogorov_integrand(model, driver))
    times = vf.times
    jt, states = path.jump_times, path.states
    # jump part of the q-integral: sum of Z(T_n, X_{T_n}) over jumps after s
    dY = np.array([vf(s, states[i + 1]) - vf(s, states[i]) for i, s in enumerate(jt)])
    jumps_after = np.concatenate((np.cumsum(dY[::-1])[::-1], [0.0]))

    worst = 0.0
    tail = 0.0      # integral of compensator + f from the end of the current piece to T
    pieces = path.pieces(path.start_time, path.horizon)
    for p_idx in range(len(pieces) - 1, -1, -1):
        a, b, x = pieces[p_idx]
        upto_b = table.upto(b, x)
        lo, hi = np.searchsorted(times, [a - 1e-12, b - 1e-12], side="left")
        if p_idx == len(pieces) - 1:
            hi = len(times)       # include s = T in the last piece
        if hi > lo:
            idx = np.arange(lo, hi)
            integral = tail + upto_b - table.cum[idx, x]
            defect = vf.values[idx, x] + jumps_after[p_idx] - g[path.final_state] - integral
            worst = max(worst, float(np.max(np.abs(defect))))
        tail += upto_b - table.upto(a, x)
    return worst


def verify_ito(model: Model, vf: ValueFunction, path: MarkedPath) -> float:
    """Max over grid nodes of the defect of the change-of-variables formula for ``v(s, X_s)``.

    The time derivative of the piecewise-linear ``v`` is its slope on each
    grid step; the generator term uses the generator matrix and the
    compensator uses the rate rows, so the two are computed independently.
    """
    vf = vf.linear()
    times, seg_cell = time_grid(model, vf.step)
    slopes = np.diff(vf.values, axis=0) / np.diff(times)[:, None]
    G = model.generator
    h = vf.step
    t0 = path.start_time
    jt, states = path.jump_times, path.states

    # breakpoints of the quadrature: grid nodes, jump times and the start
    pts = np.unique(np.concatenate(([t0], times[times >= t0], jt)))
    x_on = states[np.searchsorted(jt, pts[:-1], side="right")]        # state on [p_i, p_{i+1})
    seg = np.minimum(np.floor((pts[:-1] + pts[1:]) / (2 * h)).astype(int), len(times) - 2)
    cells = seg_cell[seg]
    Va, Vb = vf.at(pts[:-1]), vf.at(pts[1:])
    widths = np.diff(pts)
    rows = np.arange(len(widths))

    dv = slopes[seg, x_on] * widths
    gen_a = np.einsum("iy,iy->i", G[cells, x_on], Va)
    gen_b = np.einsum("iy,iy->i", G[cells, x_on], Vb)
    gen = 0.5 * widths * (gen_a + gen_b)
    nu_rows = model.nu[cells, x_on]
    comp_a = np.einsum("iy,iy->i", Va - Va[rows, x_on][:, None], nu_rows)
    comp_b = np.einsum("iy,iy->i", Vb - Vb[rows, x_on][:, None], nu_rows)
    comp = 0.5 * widths * (comp_a + comp_b)
    drift = np.concatenate(([0.0], np.cumsum(dv + gen - comp)))

    jump_at = np.searchsorted(pts, jt)
    jumps = np.zeros(len(pts))
    for i, s in enumerate(jt):
        jumps[jump_at[i]] += vf(s, states[i + 1]) - vf(s, states[i])
    jump_part = np.cumsum(jumps)

    x_at = states[np.searchsorted(jt, pts, side="right")]
    lhs = vf(pts, x_at)
    defect = lhs - vf(t0, path.start_state) - drift - jump_part
    on_grid = np.isin(pts, times)
    return float(np.max(np.abs(defect[on_grid]))) if on_grid.any() else 0.0


def _source_table(model: Model, source) -> np.ndarray:
    src = np.asarray(source, dtype=float)
    if src.ndim <= 1:
        src = np.broadcast_to(src, (model.n,))[None]
    if src.shape[1:] != (model.n,) or len(src) not in (1, model.n_cells):
        raise ValueError("source must be a scalar, an n-vector or a (cells, n) table")
    return np.broadcast_to(src, (model.n_cells, model.n))


@dataclass(frozen=True)
class EnergyResult:
    lhs: float
    rhs: float
    gap: float
    se: float
    n_paths: int


def energy_identity_gap(model: Model, vf: ValueFunction, source, t: float, x: int, beta: float,
                        n_paths: int, seed: int = 0) -> EnergyResult:
    """Monte Carlo estimates of both sides of the weighted energy identity at time ``t``.

    ``vf`` must solve the linear equation with the piecewise-constant
    ``source`` (scalar, per state, or per cell and state) and terminal
    vector ``vf.terminal``.
    """
    src = _source_table(model, source)
    nu = model.nu

    def y_sq(ts, V, k):
        return np.exp(beta * ts)[:, None] * V**2

    def z_sq(ts, V, k):
        D = V[:, None, :] - V[:, :, None]                   # [m, x, y]
        return np.exp(beta * ts)[:, None] * np.einsum("mxy,xy->mx", D**2, nu[k])

    def y_src(ts, V, k):
        return np.exp(beta * ts)[:, None] * V * src[k]

    tabs = [NodeIntegrand(model, vf, F) for F in (y_sq, z_sq, y_src)]
    g = vf.terminal
    T = model.horizon
    y0 = vf(t, x)
    batch = simulate_batch(model, t, x, n_paths, seed)
    pieces = batch.pieces()
    I = [tab.path_integrals(pieces) for tab in tabs]
    lhs = math.exp(beta * t) * y0**2 + beta * I[0] + I[1]
    rhs = math.exp(beta * T) * g[batch.final_state] ** 2 + 2.0 * I[2]
    gap, se = mean_and_se(lhs - rhs)
    return EnergyResult(float(np.mean(lhs)), float(np.mean(rhs)), gap, se, n_paths)


@dataclass(frozen=True)
class AprioriResult:
    lhs: float
    lhs_se: float
    rhs: float
    rhs_se: float
    n_paths: int


def a_priori_terms(model: Model, vf1: ValueFunction, vf2: ValueFunction, src1, src2, t: float, x: int,
                   n_paths: int, seed: int = 0) -> AprioriResult:
    """Both sides of the stability estimate for two linear problems.

    ``lhs = E int |Y1 - Y2|^2 + E int int |Z1 - Z2|^2 nu`` and
    ``rhs = E |g1(X_T) - g2(X_T)|^2 + E int |f1 - f2|^2``; the constant
    relating them is left to the caller.
    """
    d = ValueFunction(vf1.times, vf1.values - vf2.values)
    dsrc = _source_table(model, src1) - _source_table(model, src2)
    nu = model.nu

    def y_sq(ts, V, k):
        return V**2

    def z_sq(ts, V, k):
        D = V[:, None, :] - V[:, :, None]
        return np.einsum("mxy,xy->mx", D**2, nu[k])

    def f_sq(ts, V, k):
        return np.broadcast_to(dsrc[k] ** 2, V.shape)

    tabs = [NodeIntegrand(model, d, F) for F in (y_sq, z_sq, f_sq)]
    dg = d.terminal
    batch = simulate_batch(model, t, x, n_paths, seed)
    pieces = batch.pieces()
    I = [tab.path_integrals(pieces) for tab in tabs]
    lhs = I[0] + I[1]
    rhs = dg[batch.final_state] ** 2 + I[2]
    lm, lse = mean_and_se(lhs)
    rm, rse = mean_and_se(rhs)
    return AprioriResult(lm, lse, rm, rse, n_paths)
