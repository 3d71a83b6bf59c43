"""Optimal control of the jump process through a change of measure.

A control multiplies the rate measure by ``r(t, x, y, u)``; running cost
``l(t, x, u)`` and terminal cost ``g`` define the objective.  Tables are
piecewise constant on the model's time cells:

* ``r[k, x, y, u]`` (dimensionless, ``0 <= r <= C_r``)
* ``l[k, x, u]`` (cost per unit time)
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from typing import Callable

import numpy as np
from scipy.linalg import expm

from .errors import NotAbsolutelyContinuous, OutOfRange, ValidationError
from .model import Model, validate_model
from .pde import Driver, ValueFunction, solve_kolmogorov
from .simulate import (MarkedPath, PathBatch, PieceBatch, first_jump_by_inversion, mean_and_se,
                       path_generators, simulate_batch, simulate_path)

TIE_TOL = 1e-12


@dataclass(frozen=True, eq=False)
class ControlModel:
    n_actions: int
    r: np.ndarray
    l: np.ndarray
    g: np.ndarray
    labels: tuple[str, ...] | None = None

    @property
    def C_r(self) -> float:
        return float(self.r.max())


def validate_control(model: Model, actions, r, l, g) -> ControlModel:
    """Build a :class:`ControlModel` from file-layout arrays.

    ``r`` is given per cell as ``m`` matrices of size ``n x n`` (shape
    ``(cells, m, n, n)``, or ``(m, n, n)`` for a single shared cell); ``l`` is
    ``(cells, n, m)`` or ``(n, m)``.
    """
    if isinstance(actions, (list, tuple)):
        labels = tuple(str(a) for a in actions)
        m = len(labels)
    else:
        labels, m = None, int(actions)
    if m < 1:
        raise ValidationError("need at least one action", "control.actions")
    n, M = model.n, model.n_cells

    r = np.asarray(r, dtype=float)
    if r.ndim == 3:
        r = np.broadcast_to(r, (M,) + r.shape)
    if r.shape != (M, m, n, n):
        raise ValidationError(f"expected r of shape {(M, m, n, n)}, got {r.shape}", "control.r")
    if not np.all(np.isfinite(r)) or np.any(r < 0):
        raise ValidationError("r entries must be finite and nonnegative", "control.r")

    l = np.asarray(l, dtype=float)
    if l.ndim == 2:
        l = np.broadcast_to(l, (M,) + l.shape)
    if l.shape != (M, n, m):
        raise ValidationError(f"expected l of shape {(M, n, m)}, got {l.shape}", "control.l")
    if not np.all(np.isfinite(l)):
        raise ValidationError("running cost must be finite", "control.l")

    g = np.asarray(g, dtype=float)
    if g.shape != (n,) or not np.all(np.isfinite(g)):
        raise ValidationError(f"terminal cost must be a finite vector of length {n}", "control.g")

    r_int = np.ascontiguousarray(np.transpose(r, (0, 2, 3, 1)))
    cm = ControlModel(m, r_int, np.array(l), np.array(g), labels)
    for arr in (cm.r, cm.l, cm.g):
        arr.setflags(write=False)
    return cm


class FeedbackPolicy:
    """Action table ``table[j, x]`` on policy cells ``[breakpoints[j], breakpoints[j+1])``."""

    def __init__(self, breakpoints, table, n_actions: int):
        self.breakpoints = np.asarray(breakpoints, dtype=float)
        self.table = np.asarray(table, dtype=int)
        self.n_actions = n_actions
        if self.table.ndim != 2 or self.table.shape[0] != len(self.breakpoints) - 1:
            raise ValidationError("policy table needs one row per policy cell", "policy")
        if np.any(self.table < 0) or np.any(self.table >= n_actions):
            raise ValidationError("policy entry is not a valid action index", "policy")

    def cell(self, s: float) -> int:
        return int(self.cells(s))

    def cells(self, s) -> np.ndarray:
        j = np.searchsorted(self.breakpoints, np.asarray(s, dtype=float), side="right") - 1
        return np.clip(j, 0, len(self.table) - 1)

    def action(self, s: float, x: int, jump_times=(), marks=()) -> int:
        return int(self.table[self.cell(s), x])

    def write_csv(self, fh) -> None:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["cell_index", "state", "action"])
        for j, row in enumerate(self.table):
            for x, u in enumerate(row):
                w.writerow([j, x, int(u)])

    @classmethod
    def read_csv(cls, fh, breakpoints, n_states: int, n_actions: int) -> "FeedbackPolicy":
        table = np.full((len(breakpoints) - 1, n_states), -1, dtype=int)
        for row in csv.DictReader(fh):
            table[int(row["cell_index"]), int(row["state"])] = int(row["action"])
        if np.any(table < 0):
            raise ValidationError("policy CSV leaves some (cell, state) unset", "policy")
        return cls(breakpoints, table, n_actions)

    def __eq__(self, other):
        return (isinstance(other, FeedbackPolicy) and np.array_equal(self.breakpoints, other.breakpoints)
                and np.array_equal(self.table, other.table))


class HistoryControl:
    """Predictable control chosen from the observed jump history.

    ``func(s, x, jump_times, marks)`` gives the action used at time ``s`` from
    pre-jump state ``x``, where the history holds only jumps strictly before
    ``s``.  It must be constant between jumps on each cell of ``breakpoints``.
    """

    def __init__(self, func: Callable, breakpoints, n_actions: int):
        self.func = func
        self.breakpoints = np.asarray(breakpoints, dtype=float)
        self.n_actions = n_actions

    def action(self, s, x, jump_times=(), marks=()) -> int:
        u = int(self.func(s, x, jump_times, marks))
        if not 0 <= u < self.n_actions:
            raise OutOfRange(f"history control returned invalid action {u}")
        return u


def random_policy(breakpoints, n_states: int, n_actions: int, rng: np.random.Generator) -> FeedbackPolicy:
    table = rng.integers(0, n_actions, size=(len(breakpoints) - 1, n_states))
    return FeedbackPolicy(breakpoints, table, n_actions)


@dataclass(frozen=True)
class HamiltonianResult:
    value: float
    argmin_set: tuple[int, ...]
    chosen: int


def _candidates(model: Model, cm: ControlModel, k: int, x: int, z: np.ndarray) -> np.ndarray:
    """``l(x, u) + sum_y z(y) (r(x, y, u) - 1) nu(x, y)`` for every action."""
    return cm.l[k, x] + (z * model.nu[k, x]) @ (cm.r[k, x] - 1.0)


def _argmin(vals: np.ndarray) -> tuple[float, tuple[int, ...]]:
    best = float(vals.min())
    tol = TIE_TOL * max(1.0, abs(best))
    return best, tuple(int(u) for u in np.nonzero(vals <= best + tol)[0])


def hamiltonian(model: Model, cm: ControlModel, s: float, x: int, z) -> HamiltonianResult:
    if not 0.0 <= s < model.horizon:
        raise OutOfRange(f"time {s!r} outside [0, {model.horizon})")
    x = model.check_state(x)
    z = np.asarray(z, dtype=float)
    if z.shape != (model.n,):
        raise OutOfRange(f"z must have length {model.n}")
    best, argset = _argmin(_candidates(model, cm, model.cell_index(s), x, z))
    return HamiltonianResult(best, argset, argset[0])


class HamiltonianDriver(Driver):
    kind = "hamiltonian"

    def __init__(self, model: Model, cm: ControlModel):
        self.model = model
        self.cm = cm
        # (r - 1) nu, laid out as [k, x, y, u]
        self._w = (cm.r - 1.0) * model.nu[..., None]

    def candidates(self, v: np.ndarray, cell: int) -> np.ndarray:
        D = v[None, :] - v[:, None]
        return self.cm.l[cell] + np.einsum("xy,xyu->xu", D, self._w[cell])

    def evaluate(self, t, v, cell):
        return self.candidates(v, cell).min(axis=1)

    def lipschitz(self, model):
        return lipschitz_bounds(model, self.cm)

    def check(self, model):
        if model is not self.model and (model.n != self.model.n or model.n_cells != self.model.n_cells):
            raise ValidationError("control tables do not match the model", "control")


def lipschitz_bounds(model: Model, cm: ControlModel) -> tuple[float, float]:
    return (cm.C_r + 1.0) * math.sqrt(model.rate_bound), 0.0


def solve_hjb(model: Model, cm: ControlModel, h: float = 1e-3, policy_cells=None):
    """Solve the HJB equation and read a feedback policy off the solution.

    The action on each policy cell is the least-index minimiser at the cell's
    left endpoint, using the solved ``v`` at that grid node.
    """
    vf = solve_kolmogorov(model, HamiltonianDriver(model, cm), cm.g, h)
    bp = model.breakpoints if policy_cells is None else np.asarray(policy_cells, dtype=float)
    table = np.empty((len(bp) - 1, model.n), dtype=int)
    times = vf.times
    for j, s in enumerate(bp[:-1]):
        i = int(round(s / vf.step))
        if abs(times[i] - s) > 1e-9:
            raise ValidationError(f"policy breakpoint {s} is not a grid node", "policy_cells")
        v = vf.values[i]
        k = model.cell_index(s)
        for x in range(model.n):
            table[j, x] = _argmin(_candidates(model, cm, k, x, v - v[x]))[1][0]
    return vf, FeedbackPolicy(bp, table, cm.n_actions)


def _refine(*grids) -> np.ndarray:
    pts = np.unique(np.concatenate([np.asarray(g, dtype=float) for g in grids]))
    keep = np.concatenate(([True], np.diff(pts) > 1e-12))
    return pts[keep]


def controlled_model(model: Model, cm: ControlModel, policy: FeedbackPolicy) -> Model:
    """Model with rates ``r(s, x, y, u(s, x)) nu(s, x, y)`` on the common refinement of cells."""
    bp = _refine(model.breakpoints, policy.breakpoints)
    bp = bp[(bp >= 0) & (bp <= model.horizon)]
    xs = np.arange(model.n)
    cells = []
    for a, b in zip(bp[:-1], bp[1:]):
        mid = 0.5 * (a + b)
        k = model.cell_index(mid)
        u = policy.table[policy.cell(mid)]
        cells.append(cm.r[k, xs, :, u] * model.nu[k])
    return validate_model(model.n, model.horizon, bp, cells, model.labels)


def _breaks(model: Model, control) -> np.ndarray:
    return _refine(model.breakpoints, control.breakpoints)


@dataclass(frozen=True, eq=False)
class ActionPieces:
    """Path pieces with the rate cell and action in force, plus the same for each jump."""

    pieces: PieceBatch
    cell: np.ndarray
    action: np.ndarray
    jump_cell: np.ndarray
    jump_action: np.ndarray


def resolve_actions(model: Model, cm: ControlModel, control, batch: PathBatch) -> ActionPieces:
    """Evaluate the control predictably along every path of ``batch``.

    On each piece the action comes from the history before it; at a jump
    time it comes from the pre-jump state.
    """
    pc = batch.pieces(_breaks(model, control))
    mid = 0.5 * (pc.a + pc.b)
    cell = model.cell_indices(mid)
    jump_cell = model.cell_indices(batch.jump_time)
    if isinstance(control, FeedbackPolicy):
        action = control.table[control.cells(mid), pc.x]
        jump_action = control.table[control.cells(batch.jump_time), batch.jump_from]
        return ActionPieces(pc, cell, action, jump_cell, jump_action)

    ends = np.concatenate(([0], np.cumsum(batch.n_jumps)))
    action = np.empty(len(mid), dtype=int)
    for i in range(len(mid)):
        p = pc.path[i]
        jt = batch.jump_time[ends[p]:ends[p + 1]]
        marks = batch.jump_to[ends[p]:ends[p + 1]]
        n_before = int(np.searchsorted(jt, mid[i]))
        action[i] = control.action(float(mid[i]), int(pc.x[i]), jt[:n_before], marks[:n_before])
    jump_action = np.empty(len(batch.jump_time), dtype=int)
    for j in range(len(jump_action)):
        p = batch.jump_path[j]
        n_before = j - ends[p]
        jump_action[j] = control.action(float(batch.jump_time[j]), int(batch.jump_from[j]),
                                        batch.jump_time[ends[p]:j], batch.jump_to[ends[p]:ends[p] + n_before])
    return ActionPieces(pc, cell, action, jump_cell, jump_action)


def batch_functionals(model: Model, cm: ControlModel, control, batch: PathBatch):
    """Per-path running cost, Girsanov log-exponent and jump-factor product."""
    ap = resolve_actions(model, cm, control, batch)
    pc = ap.pieces
    width = pc.b - pc.a
    running = pc.total(width * cm.l[ap.cell, pc.x, ap.action])
    comp = np.einsum("kxyu,kxy->kxu", 1.0 - cm.r, model.nu)
    exponent = pc.total(width * comp[ap.cell, pc.x, ap.action])
    product = np.ones(batch.n_paths)
    factors = cm.r[ap.jump_cell, batch.jump_from, batch.jump_to, ap.jump_action]
    np.multiply.at(product, batch.jump_path, factors)
    return running, exponent, product


def path_functionals(model: Model, cm: ControlModel, control, path: MarkedPath):
    """Running cost, Girsanov log-exponent and jump-factor product along one path."""
    running, exponent, product = batch_functionals(model, cm, control, PathBatch.from_paths([path]))
    return float(running[0]), float(exponent[0]), float(product[0])


@dataclass(frozen=True)
class WeightPath:
    times: np.ndarray
    values: np.ndarray

    @property
    def final(self) -> float:
        return float(self.values[-1])


def girsanov_weight(model: Model, cm: ControlModel, control, path: MarkedPath, times=None) -> WeightPath:
    """Density process ``L_s`` at the given times (default: cell breaks) plus all jump times."""
    brk = _breaks(model, control)
    extra = brk if times is None else np.asarray(times, dtype=float)
    grid = _refine([path.start_time, path.horizon], extra, path.jump_times)
    grid = grid[(grid >= path.start_time) & (grid <= path.horizon)]
    jt, states = path.jump_times, path.states
    vals = np.empty(len(grid))
    vals[0] = 1.0
    log_part = 0.0
    product = 1.0
    ji = 0
    for i in range(1, len(grid)):
        a, b = grid[i - 1], grid[i]
        for a2, b2, x in path.pieces(a, b, brk):
            mid = 0.5 * (a2 + b2)
            k = model.cell_index(mid)
            n_before = int(np.searchsorted(jt, mid))
            u = control.action(mid, x, jt[:n_before], states[1:n_before + 1])
            log_part += (b2 - a2) * float((1.0 - cm.r[k, x, :, u]) @ model.nu[k, x])
        while ji < len(jt) and jt[ji] <= b:
            x, y = int(states[ji]), int(states[ji + 1])
            u = control.action(float(jt[ji]), x, jt[:ji], states[1:ji + 1])
            product *= cm.r[model.cell_index(float(jt[ji])), x, y, u]
            ji += 1
        vals[i] = math.exp(log_part) * product
    return WeightPath(grid, vals)


def simulate_controlled(model: Model, cm: ControlModel, control, t: float, x: int,
                        rng: np.random.Generator) -> MarkedPath:
    """Exact simulation under the controlled law for any predictable control."""
    if isinstance(control, FeedbackPolicy):
        return simulate_path(controlled_model(model, cm, control), t, x, rng)
    brk = _breaks(model, control)
    times, marks = [], []
    s, cur = float(t), int(x)
    while s < model.horizon:
        hist_t, hist_x = np.asarray(times), np.asarray(marks, dtype=int)

        def row(k, s=s, cur=cur, hist_t=hist_t, hist_x=hist_x):
            mid = 0.5 * (max(s, brk[k]) + brk[k + 1])
            km = model.cell_index(mid)
            u = control.action(mid, cur, hist_t, hist_x)
            return cm.r[km, cur, :, u] * model.nu[km, cur]

        tau, y = first_jump_by_inversion(brk, row, s, cur, rng)
        if tau is None:
            break
        times.append(tau)
        marks.append(y)
        s, cur = tau, y
    return MarkedPath(float(t), int(x), np.asarray(times, dtype=float), np.asarray(marks, dtype=int),
                      model.horizon)


def simulate_controlled_batch(model: Model, cm: ControlModel, control, t: float, x: int, n_paths: int,
                              seed: int = 0) -> PathBatch:
    if isinstance(control, FeedbackPolicy):
        return simulate_batch(controlled_model(model, cm, control), t, x, n_paths, seed)
    return PathBatch.from_paths([simulate_controlled(model, cm, control, t, x, rng)
                                 for rng in path_generators(seed, n_paths)])


def cost_direct(model: Model, cm: ControlModel, control, t: float, x: int, n_paths: int, seed: int = 0):
    """Monte Carlo cost from paths simulated under the controlled law."""
    if n_paths < 2:
        raise ValueError("n_paths must be at least 2")
    batch = simulate_controlled_batch(model, cm, control, t, x, n_paths, seed)
    running, _, _ = batch_functionals(model, cm, control, batch)
    return mean_and_se(running + cm.g[batch.final_state])


def cost_reweighted(model: Model, cm: ControlModel, control, t: float, x: int, n_paths: int,
                    seed: int = 0):
    """Monte Carlo cost from uncontrolled paths weighted by the Girsanov density."""
    if n_paths < 2:
        raise ValueError("n_paths must be at least 2")
    batch = simulate_batch(model, t, x, n_paths, seed)
    running, exponent, product = batch_functionals(model, cm, control, batch)
    return mean_and_se(np.exp(exponent) * product * (running + cm.g[batch.final_state]))


def weight_mean(model: Model, cm: ControlModel, control, t: float, x: int, n_paths: int, seed: int = 0):
    """Sample mean and SE of the terminal density ``L_T``."""
    batch = simulate_batch(model, t, x, n_paths, seed)
    _, exponent, product = batch_functionals(model, cm, control, batch)
    return mean_and_se(np.exp(exponent) * product)


@dataclass(frozen=True)
class FundamentalGap:
    gap: float
    se: float
    cost: float
    cost_se: float
    identity_mean: float
    identity_se: float
    max_integrand: float
    n_paths: int


def fundamental_gap(model: Model, cm: ControlModel, control, vf: ValueFunction, t: float, x: int,
                    n_paths: int, seed: int = 0) -> FundamentalGap:
    """Estimate the nonpositive correction in ``v(t, x) = J + gap`` under the controlled law.

    Also returns the cost estimate from the same paths and the mean of
    ``v(t, x) - (J_i + gap_i)``, which vanishes in expectation.  The time
    integral uses the trapezoid rule on the value grid plus jump and cell times.
    """
    if n_paths < 2:
        raise ValueError("n_paths must be at least 2")
    w = (cm.r - 1.0) * model.nu[..., None]                  # [k, x, y, u]
    V = vf.values
    D = V[:, None, :] - V[:, :, None]                        # [i, x, y]
    # phi[k, i, x, u]: hamiltonian minus the candidate of action u, at node i with cell-k data
    cand = cm.l[:, None] + np.einsum("ixy,kxyu->kixu", D, w)
    phi_nodes = cand.min(axis=3, keepdims=True) - cand

    def phi_at(s, k, xs, u):
        v = vf.at(s)
        c = cm.l[k, xs] + np.einsum("py,pyu->pu", v - v[np.arange(len(s)), xs][:, None], w[k, xs])
        return c.min(axis=1) - c[np.arange(len(s)), u]

    times = vf.times
    # cumulative trapezoid of the node values, and their max over each cell's nodes
    cum = np.concatenate((np.zeros_like(phi_nodes[:, :1]),
                          np.cumsum(0.5 * np.diff(times)[None, :, None, None]
                                    * (phi_nodes[:, 1:] + phi_nodes[:, :-1]), axis=1)), axis=1)
    bp = model.breakpoints
    node_max = np.stack([phi_nodes[k, (times >= bp[k] - 1e-12) & (times <= bp[k + 1] + 1e-12)].max(axis=0)
                         for k in range(model.n_cells)])

    batch = simulate_controlled_batch(model, cm, control, t, x, n_paths, seed)
    ap = resolve_actions(model, cm, control, batch)
    pc, k, u = ap.pieces, ap.cell, ap.action
    xs = pc.x
    fa, fb = phi_at(pc.a, k, xs, u), phi_at(pc.b, k, xs, u)
    lo = np.searchsorted(times, pc.a, side="right")          # first node after a
    hi = np.searchsorted(times, pc.b, side="left") - 1       # last node before b
    inner = lo <= hi
    lo_c, hi_c = np.minimum(lo, len(times) - 1), np.clip(hi, 0, len(times) - 1)
    f_lo, f_hi = phi_nodes[k, lo_c, xs, u], phi_nodes[k, hi_c, xs, u]
    with_nodes = (0.5 * (times[lo_c] - pc.a) * (fa + f_lo) + cum[k, hi_c, xs, u] - cum[k, lo_c, xs, u]
                  + 0.5 * (pc.b - times[hi_c]) * (f_hi + fb))
    direct = 0.5 * (pc.b - pc.a) * (fa + fb)
    gaps = pc.total(np.where(inner, with_nodes, direct))
    worst = float(max(fa.max(), fb.max(), node_max[k[inner], xs[inner], u[inner]].max(initial=-np.inf)))
    costs = pc.total((pc.b - pc.a) * cm.l[k, xs, u]) + cm.g[batch.final_state]
    v0 = vf(t, x)
    g_mean, g_se = mean_and_se(gaps)
    c_mean, c_se = mean_and_se(costs)
    id_mean, id_se = mean_and_se(v0 - (costs + gaps))
    return FundamentalGap(g_mean, g_se, c_mean, c_se, id_mean, id_se, worst, n_paths)


def policy_cost_exact(model: Model, cm: ControlModel, policy: FeedbackPolicy, t: float = 0.0) -> np.ndarray:
    """Cost of a feedback policy from every starting state, by exact linear solves.

    On each refined cell the pair (cost-to-go, 1) evolves under the constant
    augmented generator, so one matrix exponential per cell is exact.
    """
    cmod = controlled_model(model, cm, policy)
    bp = cmod.breakpoints
    n = model.n
    xs = np.arange(n)
    w = np.append(cm.g, 1.0)
    for j in range(cmod.n_cells - 1, -1, -1):
        a, b = bp[j], bp[j + 1]
        if b <= t:
            break
        a = max(a, t)
        mid = 0.5 * (bp[j] + bp[j + 1])
        k = model.cell_index(mid)
        u = policy.table[policy.cell(mid)]
        B = np.zeros((n + 1, n + 1))
        B[:n, :n] = cmod.generator[j]
        B[:n, n] = cm.l[k, xs, u]
        w = expm(B * (b - a)) @ w
    return w[:n]


def reduce_model(lam_u, pi_u, model: Model) -> tuple[np.ndarray, float]:
    """Density ``r`` turning action-dependent rates into the reference-model form.

    ``lam_u[k, x, u]`` and ``pi_u[k, x, y, u]`` give the jump rate and jump
    measure under action ``u``.  ``r = (pi_u / pi) (lam_u / lam)`` with
    ``0/0 = 1`` in both ratios.  Where ``lam_u`` vanishes the rate measure is
    zero and the jump measure is irrelevant, so ``r`` is set to the rate ratio.
    """
    lam_u = np.asarray(lam_u, dtype=float)
    pi_u = np.asarray(pi_u, dtype=float)
    M, n = model.n_cells, model.n
    if lam_u.ndim != 3 or lam_u.shape[:2] != (M, n):
        raise ValidationError(f"lambda_u must have shape ({M}, {n}, m)", "reduction.lambda_u")
    m = lam_u.shape[2]
    if pi_u.shape != (M, n, n, m):
        raise ValidationError(f"pi_u must have shape {(M, n, n, m)}", "reduction.pi_u")
    if np.any(lam_u < 0) or np.any(pi_u < 0) or not (np.all(np.isfinite(lam_u)) and np.all(np.isfinite(pi_u))):
        raise ValidationError("rates and jump measures must be finite and nonnegative", "reduction")

    lam = model.lam[..., None]                               # [k, x, 1]
    pi = np.empty((M, n, n))
    for k in range(M):
        for x in range(n):
            row = model.nu[k, x]
            pi[k, x] = row / lam[k, x, 0] if lam[k, x, 0] > 0 else np.eye(n)[x]
    pi = pi[..., None]                                      # [k, x, y, 1]

    bad = (lam == 0) & (lam_u > 0)
    if np.any(bad):
        k, x, u = np.argwhere(bad)[0]
        raise NotAbsolutelyContinuous(
            f"lambda({k},{x}) = 0 but lambda_u = {lam_u[k, x, u]} for action {u}", "reduction")
    active = (lam_u > 0)[:, :, None, :]
    bad = active & (pi == 0) & (pi_u > 0)
    if np.any(bad):
        k, x, y, u = np.argwhere(bad)[0]
        raise NotAbsolutelyContinuous(
            f"pi({k},{x},{y}) = 0 but pi_u = {pi_u[k, x, y, u]} for action {u}", "reduction")

    rate_ratio = np.divide(lam_u, lam, out=np.ones_like(lam_u), where=lam > 0)
    both_zero = (pi == 0) & (pi_u == 0)
    jump_ratio = np.divide(pi_u, pi, out=np.ones_like(pi_u), where=~both_zero & (pi > 0))
    r = jump_ratio * rate_ratio[:, :, None, :]
    r = np.where(active, r, rate_ratio[:, :, None, :] * np.ones_like(r))
    return r, float(r.max())


def controlled_rate_tables(model: Model, cm: ControlModel) -> tuple[np.ndarray, np.ndarray]:
    """Per-action jump rate and jump measure implied by ``r nu``."""
    nu_u = cm.r * model.nu[..., None]                       # [k, x, y, u]
    lam_u = nu_u.sum(axis=2)
    eye = np.eye(model.n)[None, :, :, None]
    safe = np.where(lam_u > 0, lam_u, 1.0)[:, :, None, :]
    pi_u = np.where(lam_u[:, :, None, :] > 0, nu_u / safe, eye)
    return lam_u, pi_u
