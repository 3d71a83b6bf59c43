"""Uncontrolled jump-process data: state space, rate measure and generator.

Rates are piecewise constant in time.  ``nu[k, x, y]`` is the intensity of
jumps from ``x`` to ``y`` while ``t`` lies in the half-open cell
``[breakpoints[k], breakpoints[k + 1])``.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .errors import BadGrid, DiagonalRate, NegativeRate, OutOfRange, ValidationError


@dataclass(frozen=True)
class JumpDecomposition:
    lam: float
    pi: np.ndarray


@dataclass(frozen=True, eq=False)
class Model:
    """Validated, immutable rate data.  Build with :func:`validate_model`."""

    n: int
    horizon: float
    breakpoints: np.ndarray
    nu: np.ndarray
    labels: tuple[str, ...] | None = None
    rate_bound: float = 0.0
    # derived tables
    lam: np.ndarray = field(repr=False, default=None)
    generator: np.ndarray = field(repr=False, default=None)

    @property
    def n_cells(self) -> int:
        return len(self.breakpoints) - 1

    @property
    def states(self) -> range:
        return range(self.n)

    def cell_index(self, t: float) -> int:
        """Cell containing ``t`` under the right-continuous convention.

        ``t == horizon`` maps to the last cell so that evaluations at the
        terminal time stay well defined.
        """
        if not (0.0 <= t <= self.horizon):
            raise OutOfRange(f"time {t!r} outside [0, {self.horizon}]")
        k = int(np.searchsorted(self.breakpoints, t, side="right")) - 1
        return min(k, self.n_cells - 1)

    def cell_indices(self, t) -> np.ndarray:
        """Vectorized :meth:`cell_index` without the range check."""
        k = np.searchsorted(self.breakpoints, np.asarray(t, dtype=float), side="right") - 1
        return np.clip(k, 0, self.n_cells - 1)

    def check_state(self, x) -> int:
        if isinstance(x, (bool, np.bool_)) or not isinstance(x, (int, np.integer)):
            raise OutOfRange(f"state {x!r} is not an integer index")
        if not 0 <= x < self.n:
            raise OutOfRange(f"state {x} outside 0..{self.n - 1}")
        return int(x)

    def _check_open_time(self, t: float) -> None:
        if not (0.0 <= t < self.horizon):
            raise OutOfRange(f"time {t!r} outside [0, {self.horizon})")

    def to_dict(self) -> dict:
        out = {
            "states": self.n,
            "horizon": self.horizon,
            "time_cells": self.breakpoints.tolist(),
            "nu": self.nu.tolist(),
        }
        if self.labels:
            out["labels"] = list(self.labels)
        return out


def validate_model(
    states,
    horizon: float,
    time_cells: Sequence[float] | None,
    nu,
    labels: Sequence[str] | None = None,
) -> Model:
    """Check raw arrays and return an immutable :class:`Model`.

    ``states`` is the number of states (or a list of labels).  ``nu`` is a
    list of ``n x n`` matrices, one per time cell; a single matrix is
    accepted when there is one cell.
    """
    if isinstance(states, (list, tuple)):
        labels = tuple(str(s) for s in states)
        n = len(labels)
    else:
        n = int(states)
    if n < 1:
        raise ValidationError("need at least one state", "states")
    horizon = float(horizon)
    if not np.isfinite(horizon) or horizon <= 0:
        raise BadGrid(f"horizon must be positive and finite, got {horizon}", "horizon")

    if time_cells is None:
        time_cells = [0.0, horizon]
    bp = np.asarray(time_cells, dtype=float)
    if bp.ndim != 1 or len(bp) < 2:
        raise BadGrid("need at least two breakpoints", "time_cells")
    if bp[0] != 0.0 or not np.all(np.diff(bp) > 0):
        raise BadGrid("breakpoints must start at 0 and increase strictly", "time_cells")
    if abs(bp[-1] - horizon) > 1e-12 * max(1.0, horizon):
        raise BadGrid(f"last breakpoint {bp[-1]} differs from horizon {horizon}", "time_cells")
    bp[-1] = horizon

    rates = np.asarray(nu, dtype=float)
    if rates.ndim == 2:
        rates = rates[None]
    m = len(bp) - 1
    if rates.shape != (m, n, n):
        raise ValidationError(
            f"expected shape {(m, n, n)} for nu, got {rates.shape}", "nu")
    if not np.all(np.isfinite(rates)):
        raise ValidationError("rates must be finite", "nu")
    if np.any(rates < 0):
        k, x, y = np.argwhere(rates < 0)[0]
        raise NegativeRate(f"nu[{k}][{x}][{y}] = {rates[k, x, y]} < 0", "nu")
    diag = rates[:, np.arange(n), np.arange(n)]
    if np.any(diag != 0):
        k, x = np.argwhere(diag != 0)[0]
        raise DiagonalRate(f"nu[{k}][{x}][{x}] = {diag[k, x]} must be 0", "nu")
    if labels is not None and len(labels) != n:
        raise ValidationError("label count differs from state count", "states")

    rates.setflags(write=False)
    bp.setflags(write=False)
    lam = rates.sum(axis=2)
    gen = rates - np.einsum("kx,xy->kxy", lam, np.eye(n))
    for arr in (lam, gen):
        arr.setflags(write=False)
    return Model(
        n=n,
        horizon=horizon,
        breakpoints=bp,
        nu=rates,
        labels=tuple(labels) if labels is not None else None,
        rate_bound=float(lam.max()),
        lam=lam,
        generator=gen,
    )


def jump_decomposition(model: Model, t: float, x: int) -> JumpDecomposition:
    model._check_open_time(t)
    x = model.check_state(x)
    k = model.cell_index(t)
    return _decompose(model.nu[k, x], x)


def _decompose(row: np.ndarray, x: int) -> JumpDecomposition:
    lam = float(row.sum())
    if lam > 0:
        pi = row / lam
    else:
        pi = np.zeros_like(row)
        pi[x] = 1.0
    return JumpDecomposition(lam, pi)


def generator_apply(model: Model, t: float, v) -> np.ndarray:
    """``(L_t v)(x) = sum_y (v(y) - v(x)) nu(t, x, y)`` for every state."""
    model._check_open_time(t)
    v = np.asarray(v, dtype=float)
    if v.shape != (model.n,):
        raise OutOfRange(f"vector of length {model.n} expected, got shape {v.shape}")
    return model.generator[model.cell_index(t)] @ v


@dataclass(frozen=True)
class CallbackRates:
    """Rate measure given by a callback ``rates(t, x) -> row`` with a declared bound.

    Only usable through thinning; the file format never produces one.
    """

    n: int
    horizon: float
    rates: Callable[[float, int], np.ndarray]
    bound: float
