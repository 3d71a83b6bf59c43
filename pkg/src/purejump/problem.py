"""Problem-spec files: one JSON object with sections ``model``, ``driver``,
``control``, ``reduction`` and ``run``.  Only ``model`` is mandatory.

Matrices are row-major nested lists.  Per-cell tables may drop the leading
cell axis, in which case one table is shared by all cells.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .control import ControlModel, FeedbackPolicy, HamiltonianDriver, validate_control
from .errors import IoError, ParseError, ValidationError
from .model import Model, validate_model
from .pde import AffineDriver, Driver, ZeroDriver

SECTIONS = ("model", "driver", "control", "reduction", "run")
MODEL_KEYS = ("states", "horizon", "time_cells", "nu")
DRIVER_TAGS = ("zero", "affine", "hamiltonian")
DRIVER_KEYS = ("type", "a", "b", "c", "g")
CONTROL_KEYS = ("actions", "r", "l", "g")
REDUCTION_KEYS = ("lambda_u", "pi_u")
RUN_KEYS = ("seed", "n_paths", "step", "start", "h_quad", "policy_cells", "policy")


@dataclass(frozen=True)
class RunParams:
    seed: int = 0
    n_paths: int = 10_000
    step: float = 1e-3
    start: tuple[float, int] = (0.0, 0)
    h_quad: float = 1e-3
    policy_cells: tuple[float, ...] | None = None
    policy: tuple[tuple[int, ...], ...] | None = None


@dataclass(frozen=True, eq=False)
class Reduction:
    lam_u: np.ndarray          # [k, x, u]
    pi_u: np.ndarray           # [k, x, y, u]


@dataclass(frozen=True, eq=False)
class ProblemSpec:
    model: Model
    driver: Driver | None = None
    g: np.ndarray | None = None
    control: ControlModel | None = None
    reduction: Reduction | None = None
    run: RunParams = field(default_factory=RunParams)
    digest: str = ""

    def feedback_policy(self) -> FeedbackPolicy | None:
        """The policy given in the run section, if any."""
        if self.run.policy is None:
            return None
        bp = self.run.policy_cells if self.run.policy_cells is not None else self.model.breakpoints
        return FeedbackPolicy(bp, self.run.policy, self.control.n_actions)


def _check_keys(section: dict, allowed: tuple[str, ...], name: str) -> None:
    if not isinstance(section, dict):
        raise ParseError(f"section '{name}' must be a JSON object")
    extra = [k for k in section if k not in allowed]
    if extra:
        raise ParseError(f"unknown key '{extra[0]}' in section '{name}'")


def _array(value, where: str, dtype=float) -> np.ndarray:
    try:
        return np.asarray(value, dtype=dtype)
    except (TypeError, ValueError) as exc:
        raise ValidationError(f"not a rectangular numeric array ({exc})", where) from None


def _parse_model(sec: dict) -> Model:
    _check_keys(sec, MODEL_KEYS, "model")
    for key in ("states", "horizon", "nu"):
        if key not in sec:
            raise ValidationError(f"missing field '{key}'", "model")
    try:
        return validate_model(sec["states"], sec["horizon"], sec.get("time_cells"),
                              _array(sec["nu"], "model.nu"))
    except ValidationError as exc:
        raise exc.relocated("model") from None
    except (TypeError, ValueError) as exc:
        raise ValidationError(str(exc), "model") from None


def _state_count(arr: np.ndarray, axes: tuple[int, ...]) -> set[int]:
    return {arr.shape[a] for a in axes if -arr.ndim <= a < arr.ndim}


def _parse_control(sec: dict, model: Model) -> ControlModel:
    _check_keys(sec, CONTROL_KEYS, "control")
    for key in CONTROL_KEYS:
        if key not in sec:
            raise ValidationError(f"missing field '{key}'", "control")
    g = _array(sec["g"], "control.g")
    r = _array(sec["r"], "control.r")
    counts = _state_count(g, (0,)) | _state_count(r, (-1, -2))
    if counts != {model.n}:
        other = sorted(counts - {model.n})
        raise ValidationError(f"control section has {other[0] if other else '?'} states but model section "
                              f"has {model.n}", "control/model")
    try:
        return validate_control(model, sec["actions"], r, _array(sec["l"], "control.l"), g)
    except ValidationError as exc:
        raise exc.relocated("control") from None


def _parse_driver(sec: dict, model: Model, control: ControlModel | None) -> tuple[Driver, np.ndarray]:
    _check_keys(sec, DRIVER_KEYS, "driver")
    tag = sec.get("type")
    if tag not in DRIVER_TAGS:
        raise ParseError(f"unknown driver tag {tag!r} (expected one of {', '.join(DRIVER_TAGS)})")
    if tag == "hamiltonian":
        if control is None:
            raise ValidationError("hamiltonian driver needs a control section", "driver/control")
        if "g" in sec:
            raise ValidationError("terminal cost of a hamiltonian driver comes from control.g", "driver.g")
        return HamiltonianDriver(model, control), control.g
    if "g" not in sec:
        raise ValidationError("missing terminal vector 'g'", "driver")
    g = _array(sec["g"], "driver.g")
    if g.shape != (model.n,):
        raise ValidationError(f"driver section has {g.size} states but model section has {model.n}",
                              "driver/model")
    if tag == "zero":
        extra = [k for k in ("a", "b", "c") if k in sec]
        if extra:
            raise ParseError(f"key '{extra[0]}' is not valid for driver tag 'zero'")
        return ZeroDriver(), g
    try:
        drv = AffineDriver(model.n, *(_array(sec.get(k, 0.0), f"driver.{k}") for k in ("a", "b", "c")))
        drv.check(model)
    except ValidationError as exc:
        raise exc.relocated("driver") from None
    return drv, g


def _parse_reduction(sec: dict, model: Model) -> Reduction:
    _check_keys(sec, REDUCTION_KEYS, "reduction")
    for key in REDUCTION_KEYS:
        if key not in sec:
            raise ValidationError(f"missing field '{key}'", "reduction")
    M = model.n_cells
    lam_u = _array(sec["lambda_u"], "reduction.lambda_u")
    pi_u = _array(sec["pi_u"], "reduction.pi_u")
    if lam_u.ndim == 2:
        lam_u = np.broadcast_to(lam_u, (M,) + lam_u.shape)
    if pi_u.ndim == 3:
        pi_u = np.broadcast_to(pi_u, (M,) + pi_u.shape)
    if lam_u.ndim != 3 or pi_u.ndim != 4 or lam_u.shape[1] != model.n or pi_u.shape[2:] != (model.n, model.n):
        raise ValidationError(f"reduction tables do not match the model section's {model.n} states",
                              "reduction/model")
    # file layout is (cells, m, n, n); internal is [k, x, y, u]
    return Reduction(np.array(lam_u), np.ascontiguousarray(np.transpose(pi_u, (0, 2, 3, 1))))


def _parse_run(sec: dict, model: Model) -> RunParams:
    _check_keys(sec, RUN_KEYS, "run")
    run = RunParams()
    try:
        if "seed" in sec:
            run = replace(run, seed=int(sec["seed"]))
        if "n_paths" in sec:
            run = replace(run, n_paths=int(sec["n_paths"]))
        if "step" in sec:
            run = replace(run, step=float(sec["step"]))
        if "h_quad" in sec:
            run = replace(run, h_quad=float(sec["h_quad"]))
        if "start" in sec:
            t, x = sec["start"]
            run = replace(run, start=(float(t), int(x)))
        if "policy_cells" in sec:
            run = replace(run, policy_cells=tuple(float(s) for s in sec["policy_cells"]))
        if "policy" in sec:
            run = replace(run, policy=tuple(tuple(int(u) for u in row) for row in sec["policy"]))
    except (TypeError, ValueError) as exc:
        raise ValidationError(f"bad run parameter ({exc})", "run") from None
    return run


def parse_spec(data: dict, digest: str = "") -> ProblemSpec:
    """Validate an already decoded spec object."""
    if not isinstance(data, dict):
        raise ParseError("spec file must hold a JSON object")
    _check_keys(data, SECTIONS, "top level")
    if "model" not in data:
        raise ValidationError("missing section", "model")
    model = _parse_model(data["model"])
    control = _parse_control(data["control"], model) if "control" in data else None
    driver, g = _parse_driver(data["driver"], model, control) if "driver" in data else (None, None)
    reduction = _parse_reduction(data["reduction"], model) if "reduction" in data else None
    run = _parse_run(data.get("run", {}), model)
    if run.policy is not None and control is None:
        raise ValidationError("a policy needs a control section", "run.policy/control")
    spec = ProblemSpec(model, driver, g, control, reduction, run, digest)
    if run.policy is not None:
        try:
            spec.feedback_policy()
        except ValidationError as exc:
            raise exc.relocated("run") from None
    return spec


def load_spec(path) -> ProblemSpec:
    """Read, decode and validate a spec file; ``digest`` is the SHA-256 of its bytes."""
    try:
        raw = Path(path).read_bytes()
    except OSError as exc:
        raise IoError(f"cannot read spec file {path}: {exc.strerror or exc}") from None
    try:
        data = json.loads(raw)
    except (json.JSONDecodeError, UnicodeDecodeError) as exc:
        raise ParseError(f"{path}: invalid JSON ({exc})") from None
    return parse_spec(data, hashlib.sha256(raw).hexdigest())


def fixture_path(name: str) -> Path:
    """Location of a bundled fixture such as ``two_state.json``."""
    return Path(__file__).with_name("fixtures") / name
