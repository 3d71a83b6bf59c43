"""Backward solvers for the nonlinear Kolmogorov equation

    d/dt v(t, x) + (L_t v)(t, x) + f(t, x, v(t, x), v(t, .) - v(t, x)) = 0,
    v(T, x) = g(x),

by fixed-step RK4 time marching and by the integral-equation fixed-point map.
"""

from __future__ import annotations

import csv
import math
import warnings
from dataclasses import dataclass
from typing import Callable

import numpy as np

from .errors import BadGrid, NonFiniteValue, OutOfRange, ValidationError
from .model import Model
from .textio import fmt_float


@dataclass(frozen=True, eq=False)
class ValueFunction:
    """Node values ``values[i, x] = v(times[i], x)`` on a uniform grid.

    Without ``slopes`` the function is linear in ``t`` between nodes.  The
    solvers also record ``slopes[j, 0]`` and ``slopes[j, 1]``, the time
    derivatives at the left and right end of step ``j`` (one-sided, so they
    may differ across a rate breakpoint); interpolation is then cubic Hermite.
    """

    times: np.ndarray
    values: np.ndarray
    slopes: np.ndarray | None = None

    @property
    def step(self) -> float:
        return float(self.times[1] - self.times[0])

    @property
    def horizon(self) -> float:
        return float(self.times[-1])

    @property
    def n(self) -> int:
        return self.values.shape[1]

    @property
    def terminal(self) -> np.ndarray:
        return self.values[-1]

    def linear(self) -> "ValueFunction":
        return ValueFunction(self.times, self.values)

    def _locate(self, t):
        t = np.asarray(t, dtype=float)
        if np.any(t < self.times[0] - 1e-12) or np.any(t > self.times[-1] + 1e-12):
            raise OutOfRange("time outside the value grid")
        h = self.step
        i = np.clip(np.floor((t - self.times[0]) / h).astype(int), 0, len(self.times) - 2)
        w = (t - self.times[i]) / h
        # snap roundoff so node values come back exactly
        w = np.where(np.abs(w) < 1e-12, 0.0, np.where(np.abs(w - 1) < 1e-12, 1.0, w))
        return i, w

    def _weights(self, w):
        if self.slopes is None:
            return 1.0 - w, w, None, None
        h = self.step
        w2, w3 = w * w, w * w * w
        return (2 * w3 - 3 * w2 + 1, -2 * w3 + 3 * w2, h * (w3 - 2 * w2 + w), h * (w3 - w2))

    def __call__(self, t, y):
        """``v(t, y)`` with numpy broadcasting over ``t`` and ``y``."""
        i, w = self._locate(t)
        y = np.asarray(y)
        a, b, c, d = self._weights(w)
        out = self.values[i, y] * a + self.values[i + 1, y] * b
        if c is not None:
            out = out + self.slopes[i, 0, y] * c + self.slopes[i, 1, y] * d
        return float(out) if out.ndim == 0 else out

    def at(self, t) -> np.ndarray:
        """Full state vector ``v(t, .)``; shape ``(..., n)``."""
        i, w = self._locate(t)
        a, b, c, d = (None if q is None else np.asarray(q)[..., None] for q in self._weights(w))
        out = self.values[i] * a + self.values[i + 1] * b
        if c is not None:
            out = out + self.slopes[i, 0] * c + self.slopes[i, 1] * d
        return out

    def write_csv(self, fh) -> None:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["t", "state", "value"])
        for t, row in zip(self.times, self.values):
            for x, val in enumerate(row):
                w.writerow([fmt_float(t), x, fmt_float(val)])


class Driver:
    """Generator ``f(t, x, y, z)`` of the backward equation.

    ``evaluate(t, v, cell)`` returns ``f(t, x, v[x], v - v[x])`` for every
    state ``x`` at once; ``cell`` is the rate cell the caller integrates over,
    so coefficient tables never switch inside a step.
    """

    kind = "abstract"

    def evaluate(self, t: float, v: np.ndarray, cell: int) -> np.ndarray:
        raise NotImplementedError

    def lipschitz(self, model: Model) -> tuple[float, float]:
        """``(L, L')``: constants for the ``z`` and ``y`` arguments."""
        raise NotImplementedError

    def check(self, model: Model) -> None:
        pass

    def __call__(self, t: float, x: int, y: float, z) -> float:
        raise NotImplementedError


class ZeroDriver(Driver):
    kind = "zero"

    def evaluate(self, t, v, cell):
        return np.zeros_like(v)

    def lipschitz(self, model):
        return 0.0, 0.0

    def __call__(self, t, x, y, z):
        return 0.0


def _cell_table(arr, tail: tuple[int, ...], name: str) -> np.ndarray:
    """Coerce a scalar, per-state or per-cell table to shape ``(cells,) + tail``."""
    arr = np.asarray(arr, dtype=float)
    if arr.ndim <= len(tail):
        try:
            arr = np.broadcast_to(arr, tail)[None]
        except ValueError:
            raise ValidationError(f"bad shape {arr.shape}", f"driver.{name}") from None
    if arr.shape[1:] != tail:
        raise ValidationError(f"bad shape {arr.shape}", f"driver.{name}")
    if not np.all(np.isfinite(arr)):
        raise ValidationError(f"non-finite entry in {name}", f"driver.{name}")
    return np.array(arr)


class AffineDriver(Driver):
    """``f = a(t,x) + b(t,x) y + sum_y c(t,x,y) z(y)`` with per-cell tables."""

    kind = "affine"

    def __init__(self, n: int, a=0.0, b=0.0, c=0.0):
        self.n = n
        self.a = _cell_table(a, (n,), "a")
        self.b = _cell_table(b, (n,), "b")
        self.c = _cell_table(c, (n, n), "c")

    @staticmethod
    def _k(arr, cell):
        return arr[cell if len(arr) > 1 else 0]

    def check(self, model):
        if model.n != self.n:
            raise ValidationError(f"driver has {self.n} states, model {model.n}", "driver")
        for name, arr in (("a", self.a), ("b", self.b), ("c", self.c)):
            if len(arr) not in (1, model.n_cells):
                raise ValidationError(
                    f"{len(arr)} cells given, model has {model.n_cells}", f"driver.{name}")

    def evaluate(self, t, v, cell):
        c = self._k(self.c, cell)
        return self._k(self.a, cell) + self._k(self.b, cell) * v + c @ v - c.sum(axis=1) * v

    def lipschitz(self, model):
        self.check(model)
        L = 0.0
        for k in range(model.n_cells):
            c = self._k(self.c, k)
            nu = model.nu[k]
            if np.any((c != 0) & (nu == 0)):
                raise ValidationError("c is nonzero where the rate vanishes; no finite L", "driver.c")
            ratio = np.divide(c**2, nu, out=np.zeros_like(nu), where=nu > 0)
            L = max(L, float(np.sqrt(ratio.sum(axis=1)).max()))
        return L, float(np.abs(self.b).max())

    def source(self) -> np.ndarray:
        """The ``a`` table, i.e. ``f(t, x, 0, 0)``."""
        return self.a


class CustomDriver(Driver):
    """User callback with declared Lipschitz constants.

    ``func(t, x, y, z)`` is called per state unless ``vectorized`` is set, in
    which case ``func(t, v, cell)`` must return the whole vector.
    """

    kind = "custom"

    def __init__(self, func: Callable, L: float, L_prime: float, vectorized: bool = False):
        if not (np.isfinite(L) and np.isfinite(L_prime) and L >= 0 and L_prime >= 0):
            raise ValidationError("Lipschitz constants must be finite and nonnegative", "driver")
        self.func = func
        self.L = float(L)
        self.L_prime = float(L_prime)
        self.vectorized = vectorized

    def evaluate(self, t, v, cell):
        if self.vectorized:
            return np.asarray(self.func(t, v, cell), dtype=float)
        return np.array([self.func(t, x, v[x], v - v[x]) for x in range(len(v))], dtype=float)

    def lipschitz(self, model):
        return self.L, self.L_prime

    def __call__(self, t, x, y, z):
        return float(self.func(t, x, y, z))


def truncate(driver: Driver, g, level: float, model: Model | None = None):
    """Clamp the driver output and the terminal vector to ``[-level, level]``.

    The clamped driver keeps the constants of the original one; ``model`` is
    only needed to read them when the original computes them from rates.
    """
    if level <= 0:
        raise ValueError("truncation level must be positive")
    L, Lp = driver.lipschitz(model) if model is not None else _declared(driver)

    def clipped(t, v, cell):
        return np.clip(driver.evaluate(t, v, cell), -level, level)

    out = CustomDriver(clipped, L, Lp, vectorized=True)
    out.check = driver.check
    return out, np.clip(np.asarray(g, dtype=float), -level, level)


def _declared(driver: Driver) -> tuple[float, float]:
    if isinstance(driver, CustomDriver):
        return driver.L, driver.L_prime
    if isinstance(driver, ZeroDriver):
        return 0.0, 0.0
    raise ValueError("pass the model so the Lipschitz constants can be computed")


def time_grid(model: Model, h: float) -> tuple[np.ndarray, np.ndarray]:
    """Uniform nodes of step ``h`` and the rate cell of each step ``[t_i, t_{i+1}]``."""
    T = model.horizon
    N = int(round(T / h))
    if N < 1 or abs(N * h - T) > 1e-9 * T:
        raise BadGrid(f"step {h} does not divide horizon {T}")
    times = np.linspace(0.0, T, N + 1)
    for s in model.breakpoints[1:-1]:
        j = s / (T / N)
        if abs(j - round(j)) > 1e-7:
            raise BadGrid(f"rate breakpoint {s} is not a grid node for step {h}")
    seg_cell = np.searchsorted(model.breakpoints, times[:-1] + 0.5 * T / N, side="right") - 1
    return times, np.minimum(seg_cell, model.n_cells - 1)


def _terminal(model: Model, g) -> np.ndarray:
    g = np.asarray(g, dtype=float)
    if g.shape != (model.n,) or not np.all(np.isfinite(g)):
        raise ValidationError(f"terminal vector must be finite with length {model.n}", "g")
    return g


def solve_kolmogorov(model: Model, driver: Driver, g, h: float = 1e-3) -> ValueFunction:
    """Classical RK4 backward from ``v(T) = g`` at fixed step ``h``."""
    g = _terminal(model, g)
    driver.check(model)
    times, seg_cell = time_grid(model, h)
    h = float(times[1] - times[0])
    if model.rate_bound * h > 0.1:
        warnings.warn(f"rate bound x step = {model.rate_bound * h:.3g} > 0.1; RK4 may be inaccurate",
                      stacklevel=2)
    G = model.generator
    N = len(times) - 1
    vals = np.empty((N + 1, model.n))
    vals[N] = g
    v = g.copy()
    for i in range(N - 1, -1, -1):
        k = int(seg_cell[i])
        t1, t0 = times[i + 1], times[i]
        tm = 0.5 * (t0 + t1)

        def rhs(t, w):
            return G[k] @ w + driver.evaluate(t, w, k)

        k1 = rhs(t1, v)
        k2 = rhs(tm, v + 0.5 * h * k1)
        k3 = rhs(tm, v + 0.5 * h * k2)
        k4 = rhs(t0, v + h * k3)
        v = v + (h / 6.0) * (k1 + 2 * k2 + 2 * k3 + k4)
        if not np.all(np.isfinite(v)):
            raise NonFiniteValue(f"non-finite value at t={t0}; reduce the step or check the driver")
        vals[i] = v
    vals[N] = g
    return ValueFunction(times, vals, _node_slopes(model, driver, times, seg_cell, vals))


def _node_slopes(model, driver, times, seg_cell, vals) -> np.ndarray:
    """One-sided ``dv/dt = -(L v + f)`` at both ends of every step."""
    G = model.generator
    out = np.empty((len(times) - 1, 2, model.n))
    for j in range(len(times) - 1):
        k = int(seg_cell[j])
        for side in (0, 1):
            v = vals[j + side]
            out[j, side] = -(G[k] @ v + driver.evaluate(times[j + side], v, k))
    return out


def _fixed_point_map(model: Model, driver: Driver, g: np.ndarray, u: ValueFunction,
                     seg_cell: np.ndarray) -> np.ndarray:
    """``g + int_t^T [L_s u + f(s, u)] ds`` at every node, trapezoid per step."""
    times, vals = u.times, u.values
    G = model.generator
    N = len(times) - 1
    seg = np.empty((N, model.n))
    for j in range(N):
        k = int(seg_cell[j])
        left = G[k] @ vals[j] + driver.evaluate(times[j], vals[j], k)
        right = G[k] @ vals[j + 1] + driver.evaluate(times[j + 1], vals[j + 1], k)
        seg[j] = 0.5 * (times[j + 1] - times[j]) * (left + right)
    out = np.empty_like(vals)
    out[N] = g
    out[:N] = g + np.cumsum(seg[::-1], axis=0)[::-1]
    return out


def picard_iterate(model: Model, driver: Driver, g, v0: ValueFunction, k_max: int = 50,
                   tol: float = 1e-12, beta: float = 0.0):
    """Iterate the fixed-point map from ``v0``.

    Returns the last iterate and the distances between successive iterates,
    measured in the weighted sup norm ``max_i exp(-beta (T - t_i)) |.|``
    (``beta = 0`` is the plain sup norm).  Iteration stops once the plain
    sup-norm distance is at most ``tol``, whatever ``beta`` is.
    """
    if k_max < 1:
        raise ValueError("k_max must be at least 1")
    g = _terminal(model, g)
    driver.check(model)
    times, seg_cell = time_grid(model, v0.step)
    if len(times) != len(v0.times):
        raise BadGrid("initial guess is on a different grid")
    weight = np.exp(-beta * (model.horizon - times))[:, None]
    u = ValueFunction(v0.times, np.array(v0.values, dtype=float))
    diffs: list[float] = []
    for _ in range(k_max):
        new = _fixed_point_map(model, driver, g, u, seg_cell)
        if not np.all(np.isfinite(new)):
            raise NonFiniteValue("non-finite Picard iterate")
        step = np.abs(new - u.values)
        diffs.append(float(np.max(weight * step)))
        u = ValueFunction(v0.times, new)
        if np.max(step) <= tol:
            break
    return u, diffs


def sup_lipschitz(model: Model, driver: Driver) -> float:
    """Sup-norm Lipschitz constant of ``u -> L_s u + f(s, u)``: ``2 Lambda + L' + 2 L sqrt(Lambda)``."""
    L, Lp = driver.lipschitz(model)
    lam = model.rate_bound
    return 2 * lam + Lp + 2 * L * math.sqrt(lam)


def contraction_weight(model: Model, driver: Driver, h: float, factor: float = 2.0) -> tuple[float, float]:
    """Weight ``beta`` making the discrete fixed-point map a contraction, and its modulus.

    With ``C`` from :func:`sup_lipschitz` and ``beta = factor * C`` the map
    contracts with modulus ``(C / beta) * (beta h / 2) / tanh(beta h / 2)``;
    the last factor is the trapezoid overshoot on the exponential weight.
    """
    C = sup_lipschitz(model, driver)
    if C == 0:
        return 0.0, 0.0
    beta = factor * C
    x = 0.5 * beta * h
    return beta, (C / beta) * (x / math.tanh(x))


def gronwall_factor(model: Model, driver: Driver) -> float:
    """Bound on ``sup|v1 - v2| / max|g1 - g2|`` for two terminal vectors."""
    return math.exp(sup_lipschitz(model, driver) * model.horizon)


def residual_norm(model: Model, driver: Driver, g, v: ValueFunction) -> float:
    """Max defect of the integral form of the equation over the grid nodes."""
    g = _terminal(model, g)
    _, seg_cell = time_grid(model, v.step)
    return float(np.max(np.abs(v.values - _fixed_point_map(model, driver, g, v, seg_cell))))


def constant_extension(model: Model, g, h: float) -> ValueFunction:
    times, _ = time_grid(model, h)
    g = _terminal(model, g)
    return ValueFunction(times, np.tile(g, (len(times), 1)))
