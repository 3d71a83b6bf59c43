"""Exact simulation of the marked point process and path integrals against it.

Integrands passed to :func:`stochastic_integral` are callables ``H(s, y, x)``
where ``s`` is time, ``y`` the candidate post-jump state and ``x`` the
pre-jump state ``X_{s-}``.  They are evaluated with numpy broadcasting
(``s`` a column, ``y`` a row), and scalar results are broadcast.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from typing import Callable, Iterable, Iterator, Sequence

import numpy as np

from .errors import OutOfRange
from .model import CallbackRates, Model
from .textio import fmt_float

Integrand = Callable[[np.ndarray, np.ndarray, int], "np.ndarray | float"]

# paths per independently seeded stream in Monte Carlo loops
BLOCK_SIZE = 1024


@dataclass(frozen=True)
class RngStream:
    seed: int
    index: int = 0

    def generator(self) -> np.random.Generator:
        ss = np.random.SeedSequence(int(self.seed), spawn_key=(int(self.index),))
        return np.random.Generator(np.random.PCG64(ss))


def path_generators(seed: int, n_paths: int, block: int = BLOCK_SIZE) -> Iterator[np.random.Generator]:
    """One generator per path; path ``i`` draws from stream ``i // block``."""
    rng = None
    for i in range(n_paths):
        if i % block == 0:
            rng = RngStream(seed, i // block).generator()
        yield rng


@dataclass(frozen=True, eq=False)
class MarkedPath:
    start_time: float
    start_state: int
    jump_times: np.ndarray
    marks: np.ndarray
    horizon: float

    @property
    def n_jumps(self) -> int:
        return len(self.jump_times)

    @property
    def final_state(self) -> int:
        return int(self.marks[-1]) if len(self.marks) else self.start_state

    @property
    def states(self) -> np.ndarray:
        """States occupied on successive inter-jump intervals."""
        return np.concatenate(([self.start_state], self.marks)).astype(int)

    def state_at(self, s: float) -> int:
        """Right-continuous ``X_s``."""
        i = int(np.searchsorted(self.jump_times, s, side="right"))
        return int(self.states[i])

    def state_before(self, s: float) -> int:
        """Left limit ``X_{s-}``."""
        i = int(np.searchsorted(self.jump_times, s, side="left"))
        return int(self.states[i])

    def pieces(self, lo: float, hi: float, breaks: Sequence[float] = ()) -> list[tuple[float, float, int]]:
        """Split ``[lo, hi]`` into intervals of constant state and no interior break.

        Each piece ``(a, b, x)`` has ``X_s = x`` for ``s`` in ``[a, b)`` and
        ``X_{s-} = x`` for ``s`` in ``(a, b]``.
        """
        if hi <= lo:
            return []
        cuts = [lo, hi]
        cuts += [float(b) for b in breaks if lo < b < hi]
        jt = self.jump_times
        cuts += [float(s) for s in jt[(jt > lo) & (jt < hi)]]
        cuts = sorted(set(cuts))
        out = []
        for a, b in zip(cuts[:-1], cuts[1:]):
            out.append((a, b, self.state_at(a)))
        return out


@dataclass(frozen=True, eq=False)
class PieceBatch:
    """Constant-state pieces ``[a, b)`` of many paths, flattened and ordered by path."""

    a: np.ndarray
    b: np.ndarray
    x: np.ndarray
    path: np.ndarray
    n_paths: int

    def total(self, values) -> np.ndarray:
        """Sum per-piece ``values`` into one number per path."""
        return np.bincount(self.path, weights=values, minlength=self.n_paths)


@dataclass(frozen=True, eq=False)
class PathBatch:
    """Many paths from a common start, stored as flat jump arrays ordered by path."""

    start_time: float
    start_state: int
    horizon: float
    n_paths: int
    jump_time: np.ndarray
    jump_from: np.ndarray
    jump_to: np.ndarray
    jump_path: np.ndarray
    final_state: np.ndarray

    @classmethod
    def from_paths(cls, paths: Sequence[MarkedPath]) -> "PathBatch":
        first = paths[0]
        cat = lambda parts, dt: np.concatenate(parts).astype(dt) if parts else np.empty(0, dt)
        return cls(
            first.start_time, first.start_state, first.horizon, len(paths),
            cat([p.jump_times for p in paths], float),
            cat([p.states[:-1] for p in paths], int),
            cat([p.marks for p in paths], int),
            cat([np.full(p.n_jumps, i) for i, p in enumerate(paths)], int),
            np.array([p.final_state for p in paths], dtype=int),
        )

    @property
    def n_jumps(self) -> np.ndarray:
        return np.bincount(self.jump_path, minlength=self.n_paths)

    def paths(self) -> Iterator[MarkedPath]:
        ends = np.concatenate(([0], np.cumsum(self.n_jumps)))
        for i in range(self.n_paths):
            sl = slice(ends[i], ends[i + 1])
            yield MarkedPath(self.start_time, self.start_state, self.jump_time[sl],
                             self.jump_to[sl], self.horizon)

    def pieces(self, breaks: Sequence[float] = ()) -> PieceBatch:
        """Inter-jump intervals on ``[t, T]``, further split at ``breaks``."""
        J = self.n_jumps
        per = J + 1
        path = np.repeat(np.arange(self.n_paths), per)
        int_start = np.concatenate(([0], np.cumsum(per)[:-1]))
        jump_start = int_start - np.arange(self.n_paths)
        q = np.arange(len(path)) - int_start[path]
        jidx = jump_start[path] + q
        first, last = q == 0, q == J[path]
        a = np.where(first, self.start_time, self.jump_time[np.maximum(jidx - 1, 0)] if len(self.jump_time) else 0.0)
        b = np.where(last, self.horizon, self.jump_time[np.minimum(jidx, len(self.jump_time) - 1)]
                     if len(self.jump_time) else 0.0)
        x = np.where(first, self.start_state, self.jump_to[np.maximum(jidx - 1, 0)] if len(self.jump_to) else 0)
        keep = b > a
        a, b, x, path = a[keep], b[keep], x[keep], path[keep]

        inner = np.asarray(sorted(float(s) for s in breaks), dtype=float)
        brk = np.concatenate(([-np.inf], inner, [np.inf]))
        ca = np.searchsorted(brk, a, side="right") - 1
        cb = np.searchsorted(brk, b, side="left") - 1
        count = cb - ca + 1
        rep = np.repeat(np.arange(len(a)), count)
        c = ca[rep] + (np.arange(len(rep)) - np.repeat(np.cumsum(count) - count, count))
        a2 = np.maximum(a[rep], brk[c])
        b2 = np.minimum(b[rep], brk[c + 1])
        return PieceBatch(a2, b2, x[rep].astype(int), path[rep], self.n_paths)


def simulate_batch(model: Model, t: float, x: int, n_paths: int, seed: int = 0) -> PathBatch:
    """``n_paths`` independent paths; path ``i`` uses the generator from :func:`path_generators`."""
    if n_paths < 1:
        raise ValueError("n_paths must be positive")
    return PathBatch.from_paths([simulate_path(model, t, x, rng) for rng in path_generators(seed, n_paths)])


@dataclass(frozen=True)
class IntegralPair:
    p_part: float
    nu_part: float

    @property
    def q_part(self) -> float:
        return self.p_part - self.nu_part


def _check_start(model, t: float, x: int, closed: bool) -> int:
    T = model.horizon
    ok = 0.0 <= t <= T if closed else 0.0 <= t < T
    if not ok:
        raise OutOfRange(f"start time {t!r} outside [0, {T}{']' if closed else ')'}")
    if isinstance(x, (bool, np.bool_)) or not isinstance(x, (int, np.integer)) or not 0 <= x < model.n:
        raise OutOfRange(f"invalid state {x!r}")
    return int(x)


def first_jump_by_inversion(
    breakpoints: np.ndarray,
    row_of_cell: Callable[[int], np.ndarray],
    t: float,
    x: int,
    rng: np.random.Generator,
) -> tuple[float | None, int | None]:
    """Invert the integrated hazard of a piecewise-constant rate row.

    ``row_of_cell(k)`` returns the jump rates out of ``x`` on cell ``k``.
    """
    e = rng.exponential()
    last = len(breakpoints) - 2
    k = min(int(np.searchsorted(breakpoints, t, side="right")) - 1, last)
    s = t
    while True:
        row = row_of_cell(k)
        lam = float(row.sum())
        end = float(breakpoints[k + 1])
        if lam > 0:
            need = e / lam
            if need <= end - s:
                tau = s + need
                return tau, _draw_mark(row, lam, x, rng)
            e -= lam * (end - s)
        if k >= last:
            return None, None
        s = end
        k += 1


def _draw_mark(row: np.ndarray, lam: float, x: int, rng: np.random.Generator) -> int:
    cum = np.cumsum(row)
    y = int(np.searchsorted(cum, rng.random() * lam, side="right"))
    y = min(y, len(row) - 1)
    while row[y] == 0:  # only reachable through rounding at the top end
        y -= 1
    if y == x:
        raise AssertionError("sampled a self-jump; rates must vanish on the diagonal")
    return y


def sample_first_jump(model: Model, t: float, x: int, rng: np.random.Generator):
    """Return ``(jump_time, next_state)`` or ``(None, None)`` if no jump before the horizon."""
    x = _check_start(model, t, x, closed=False)
    nu = model.nu
    return first_jump_by_inversion(model.breakpoints, lambda k: nu[k, x], t, x, rng)


def sample_first_jump_thinning(rates: CallbackRates, t: float, x: int, rng: np.random.Generator):
    """Thinning against a rate-``bound`` Poisson clock for callback rate measures."""
    if not 0.0 <= t < rates.horizon:
        raise OutOfRange(f"start time {t!r} outside [0, {rates.horizon})")
    bound = float(rates.bound)
    if bound <= 0:
        return None, None
    s = t
    while True:
        s += rng.exponential(1.0 / bound)
        if s > rates.horizon:
            return None, None
        row = np.asarray(rates.rates(s, x), dtype=float)
        lam = float(row.sum())
        if lam > bound * (1 + 1e-12):
            raise OutOfRange(f"callback rate {lam} at t={s} exceeds declared bound {bound}")
        if rng.random() * bound < lam:
            return s, _draw_mark(row, lam, x, rng)


def simulate_path(model: Model, t: float, x: int, rng: np.random.Generator) -> MarkedPath:
    x = _check_start(model, t, x, closed=True)
    nu = model.nu
    bp = model.breakpoints
    T = model.horizon
    times, marks = [], []
    s, cur = t, x
    while s < T:
        tau, y = first_jump_by_inversion(bp, lambda k: nu[k, cur], s, cur, rng)
        if tau is None:
            break
        times.append(tau)
        marks.append(y)
        s, cur = tau, y
    return MarkedPath(float(t), x, np.asarray(times, dtype=float), np.asarray(marks, dtype=int), T)


def simulate_path_thinning(rates: CallbackRates, t: float, x: int, rng: np.random.Generator) -> MarkedPath:
    times, marks = [], []
    s, cur = t, int(x)
    while s < rates.horizon:
        tau, y = sample_first_jump_thinning(rates, s, cur, rng)
        if tau is None:
            break
        times.append(tau)
        marks.append(y)
        s, cur = tau, y
    return MarkedPath(float(t), int(x), np.asarray(times, dtype=float), np.asarray(marks, dtype=int),
                      rates.horizon)


def _eval(H: Integrand, s, y, x: int) -> np.ndarray:
    val = np.asarray(H(s, y, x), dtype=float)
    return np.broadcast_to(val, np.broadcast_shapes(np.shape(s), np.shape(y)))


def quadrature_nodes(a: float, b: float, nodes: np.ndarray | None, h_quad: float | None) -> np.ndarray:
    """Trapezoid nodes on ``[a, b]``: the endpoints, any declared nodes inside, and a uniform
    subgrid of width at most ``h_quad``."""
    pts = [np.array([a, b])]
    if nodes is not None:
        lo, hi = np.searchsorted(nodes, [a, b], side="right")
        pts.append(nodes[lo:hi][nodes[lo:hi] < b])
    if h_quad:
        m = int(math.ceil((b - a) / h_quad - 1e-9))
        if m > 1:
            pts.append(np.linspace(a, b, m + 1)[1:-1])
    out = np.unique(np.concatenate(pts))
    return out[(out >= a) & (out <= b)]


def stochastic_integral(
    model: Model,
    path: MarkedPath,
    H: Integrand,
    s_lo: float | None = None,
    s_hi: float | None = None,
    *,
    nodes: np.ndarray | None = None,
    h_quad: float | None = 1e-3,
    piecewise_constant: bool = False,
) -> IntegralPair:
    """Integrals of ``H`` against the jump measure and against its compensator.

    ``piecewise_constant`` declares ``H`` constant in ``s`` on each rate cell,
    in which case one evaluation per piece is exact.  Otherwise the trapezoid
    rule runs on ``nodes`` plus a uniform subgrid of width ``h_quad``; it is
    exact for integrands linear in ``s`` between those nodes.
    """
    lo = path.start_time if s_lo is None else float(s_lo)
    hi = path.horizon if s_hi is None else float(s_hi)
    if not (path.start_time <= lo <= hi <= path.horizon):
        raise OutOfRange(f"[{lo}, {hi}] not inside [{path.start_time}, {path.horizon}]")
    ys = np.arange(model.n)

    p_part = 0.0
    jt = path.jump_times
    states = path.states
    for i in np.nonzero((jt > lo) & (jt <= hi))[0]:
        s = float(jt[i])
        p_part += float(_eval(H, s, ys, int(states[i]))[states[i + 1]])

    nu_terms = []
    for a, b, x in path.pieces(lo, hi, model.breakpoints):
        row = model.nu[model.cell_index(0.5 * (a + b)), x]
        if not row.any():
            continue
        if piecewise_constant:
            nu_terms.append((b - a) * float(_eval(H, 0.5 * (a + b), ys, x) @ row))
            continue
        pts = quadrature_nodes(a, b, nodes, h_quad)
        vals = _eval(H, pts[:, None], ys[None, :], x) @ row
        nu_terms.append(float(np.sum(0.5 * np.diff(pts) * (vals[1:] + vals[:-1]))))
    return IntegralPair(p_part, math.fsum(nu_terms))


def batch_integrals(model: Model, batch: PathBatch, H: Integrand, *, h_quad: float | None = 1e-3,
                    piecewise_constant: bool = False, chunk: int = 1 << 21) -> tuple[np.ndarray, np.ndarray]:
    """Per-path ``(p_part, nu_part)`` over ``[t, T]`` for a whole batch.

    Same quadrature as :func:`stochastic_integral` without declared nodes;
    ``H`` is called once per pre-jump state with array arguments.
    """
    ys = np.arange(model.n)
    p = np.zeros(batch.n_paths)
    for x in range(model.n):
        sel = np.nonzero(batch.jump_from == x)[0]
        if len(sel):
            vals = _eval(H, batch.jump_time[sel][:, None], ys[None, :], x)
            p += np.bincount(batch.jump_path[sel], weights=vals[np.arange(len(sel)), batch.jump_to[sel]],
                             minlength=batch.n_paths)

    pc = batch.pieces(model.breakpoints[1:-1])
    rows = model.nu[model.cell_indices(0.5 * (pc.a + pc.b)), pc.x]
    width = pc.b - pc.a
    nu_part = np.zeros(batch.n_paths)
    if piecewise_constant or not h_quad:
        mids = 0.5 * (pc.a + pc.b)
        for x in range(model.n):
            sel = np.nonzero(pc.x == x)[0]
            if len(sel) == 0:
                continue
            if piecewise_constant:
                vals = np.einsum("iy,iy->i", _eval(H, mids[sel][:, None], ys[None, :], x), rows[sel])
                nu_part += np.bincount(pc.path[sel], weights=width[sel] * vals, minlength=batch.n_paths)
            else:
                for end in (pc.a, pc.b):
                    vals = np.einsum("iy,iy->i", _eval(H, end[sel][:, None], ys[None, :], x), rows[sel])
                    nu_part += np.bincount(pc.path[sel], weights=0.5 * width[sel] * vals,
                                           minlength=batch.n_paths)
        return p, nu_part

    m = np.maximum(np.ceil(width / h_quad - 1e-9).astype(int), 1)
    for x in range(model.n):
        sel = np.nonzero((pc.x == x) & rows.any(axis=1))[0]
        # bound the number of quadrature points held at once
        cum = np.cumsum(m[sel] + 1)
        for part in np.split(sel, np.searchsorted(cum, np.arange(chunk, cum[-1] if len(cum) else 0, chunk))):
            if len(part) == 0:
                continue
            cnt = m[part] + 1
            owner = np.repeat(np.arange(len(part)), cnt)
            j = np.arange(len(owner)) - np.repeat(np.cumsum(cnt) - cnt, cnt)
            step = width[part] / m[part]
            pts = pc.a[part][owner] + j * step[owner]
            pts = np.where(j == m[part][owner], pc.b[part][owner], pts)
            w = step[owner] * np.where((j == 0) | (j == m[part][owner]), 0.5, 1.0)
            vals = np.einsum("iy,iy->i", _eval(H, pts[:, None], ys[None, :], x), rows[part][owner])
            nu_part += np.bincount(pc.path[part][owner], weights=w * vals, minlength=batch.n_paths)
    return p, nu_part


def mean_and_se(samples: Iterable[float]) -> tuple[float, float]:
    """Sample mean and standard error with compensated summation."""
    x = np.asarray(list(samples) if not isinstance(samples, np.ndarray) else samples, dtype=float)
    n = len(x)
    if n < 2:
        raise ValueError("need at least two samples")
    mean = math.fsum(x) / n
    var = math.fsum((x - mean) ** 2) / (n - 1)
    return mean, math.sqrt(var / n)


@dataclass(frozen=True)
class CompensatorStats:
    p_mean: float
    p_se: float
    nu_mean: float
    nu_se: float
    q_mean: float
    q_se: float
    n_paths: int


def compensator_stats(model: Model, H: Integrand, t: float, x: int, n_paths: int, seed: int = 0,
                      **quad) -> CompensatorStats:
    if n_paths < 2:
        raise ValueError("n_paths must be at least 2")
    if quad.get("nodes") is not None:
        p, nu = np.empty(n_paths), np.empty(n_paths)
        for i, rng in enumerate(path_generators(seed, n_paths)):
            pair = stochastic_integral(model, simulate_path(model, t, x, rng), H, **quad)
            p[i], nu[i] = pair.p_part, pair.nu_part
    else:
        quad.pop("nodes", None)
        p, nu = batch_integrals(model, simulate_batch(model, t, x, n_paths, seed), H, **quad)
    pm, pse = mean_and_se(p)
    nm, nse = mean_and_se(nu)
    qm, qse = mean_and_se(p - nu)
    return CompensatorStats(pm, pse, nm, nse, qm, qse, n_paths)


def martingale_mean(model: Model, H: Integrand, t: float, x: int, n_paths: int, seed: int = 0,
                    **quad) -> tuple[float, float]:
    """Mean and standard error of the compensated integral over ``[t, T]``."""
    st = compensator_stats(model, H, t, x, n_paths, seed, **quad)
    return st.q_mean, st.q_se


def write_paths_csv(paths: Iterable[MarkedPath], fh) -> None:
    w = csv.writer(fh, lineterminator="\n")
    w.writerow(["path_id", "jump_index", "time", "from_state", "to_state"])
    for pid, path in enumerate(paths):
        states = path.states
        for j, s in enumerate(path.jump_times):
            w.writerow([pid, j, fmt_float(s), int(states[j]), int(states[j + 1])])
