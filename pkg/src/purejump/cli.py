"""Batch command line front-end.

One command per invocation: the spec file is loaded and validated, the
command runs, data tables (CSV) and the run report are written to ``--out``.
"""

from __future__ import annotations

import argparse
import io
import math
import sys
import time
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import __version__
from .bsde import NodeIntegrand, bsde_residual, energy_identity_gap, kolmogorov_integrand, verify_ito
from .control import (ControlModel, HamiltonianDriver, controlled_rate_tables, cost_direct,
                      cost_reweighted, fundamental_gap, policy_cost_exact, reduce_model, solve_hjb,
                      weight_mean)
from .errors import (BadGrid, DiagonalRate, IoError, NegativeRate, NonFiniteValue, NotAbsolutelyContinuous,
                     OutOfRange, ParseError, PureJumpError, ValidationError)
from .pde import AffineDriver, ZeroDriver, residual_norm, solve_kolmogorov
from .problem import ProblemSpec, load_spec
from .report import Check, RunReport, at_most, emit, write_text
from .simulate import (batch_integrals, mean_and_se, path_generators, simulate_batch, simulate_path,
                       write_paths_csv)
from .textio import fmt_float

COMMANDS = ("solve", "solve-hjb", "simulate", "evaluate-policy", "verify", "reduce")
EXIT_CHECK_FAILED = 1
EXIT_USAGE = 2
EXIT_CODES = (
    (0, "success, every check passed"),
    (EXIT_CHECK_FAILED, "at least one check failed"),
    (EXIT_USAGE, "bad command line"),
    (ParseError.exit_code, "spec file is not valid JSON or has an unknown section, key or driver tag"),
    (ValidationError.exit_code, "spec data inconsistent (shapes, state counts, missing sections)"),
    (IoError.exit_code, "file could not be read or written"),
    (PureJumpError.exit_code, "other library error"),
    (NegativeRate.exit_code, "negative rate in nu"),
    (DiagonalRate.exit_code, "nonzero diagonal rate in nu"),
    (BadGrid.exit_code, "bad time grid (breakpoints, horizon or step)"),
    (OutOfRange.exit_code, "start time or state out of range"),
    (NonFiniteValue.exit_code, "solver produced a non-finite value"),
    (NotAbsolutelyContinuous.exit_code, "reduction data not absolutely continuous"),
)
BSDE_PATHS = 100          # paths for the pathwise BSDE and change-of-variables checks
BSDE_TOL = 1e-6           # at h = 1e-3, scaled with h^2
GAP_INTEGRAND_TOL = 1e-9


def _need(obj, what: str, command: str):
    if obj is None:
        raise ValidationError(f"command '{command}' needs a {what} section", what)
    return obj


def _csv_text(writer) -> str:
    buf = io.StringIO()
    writer(buf)
    return buf.getvalue()


def _policy(spec: ProblemSpec, h: float):
    """The spec's policy if given, else the one read off the HJB solution."""
    given = spec.feedback_policy()
    vf, extracted = solve_hjb(spec.model, spec.control, h, spec.run.policy_cells)
    return vf, extracted, (given if given is not None else extracted)


def _solve_checks(spec: ProblemSpec, driver, g, vf) -> list[Check]:
    m = spec.model
    h = vf.step
    scale = max(1.0, (m.rate_bound * m.horizon) ** 2) * max(1.0, float(np.abs(vf.values).max()))
    return [
        at_most("terminal_condition", float(np.abs(vf.terminal - g).max()), 0.0),
        at_most("residual_norm", residual_norm(m, driver, g, vf), 10.0 * h * h * scale),
    ]


def cmd_solve(spec, files):
    driver = _need(spec.driver, "driver", "solve")
    vf = solve_kolmogorov(spec.model, driver, spec.g, spec.run.step)
    files["value.csv"] = _csv_text(vf.write_csv)
    return _solve_checks(spec, driver, spec.g, vf)


def cmd_solve_hjb(spec, files):
    cm = _need(spec.control, "control", "solve-hjb")
    vf, policy = solve_hjb(spec.model, cm, spec.run.step, spec.run.policy_cells)
    files["value.csv"] = _csv_text(vf.write_csv)
    files["policy.csv"] = _csv_text(policy.write_csv)
    return _solve_checks(spec, HamiltonianDriver(spec.model, cm), cm.g, vf)


def cmd_simulate(spec, files):
    m, run = spec.model, spec.run
    t, x = run.start
    batch = simulate_batch(m, t, x, run.n_paths, run.seed)
    paths = list(batch.paths())
    files["paths.csv"] = _csv_text(lambda fh: write_paths_csv(paths, fh))
    bad = 0
    for p in paths:
        st = p.states
        if (np.any(st[1:] == st[:-1]) or np.any(np.diff(p.jump_times) <= 0)
                or (p.n_jumps and not (t < p.jump_times[0] and p.jump_times[-1] <= m.horizon))):
            bad += 1
    counts = batch.n_jumps.astype(float)
    mc = dict(n_paths=run.n_paths, seed=run.seed)
    checks = [at_most("path_invariants", bad, 0.0)]
    mean, se = mean_and_se(counts)
    bound = m.rate_bound * (m.horizon - t)
    checks.append(Check("jump_count_bound", mean, bound, mean - bound, se, tolerance=3 * se,
                        passed=bool(mean <= bound + 3 * se), **mc))
    return checks


def _agreement(name, a, b, **mc) -> Check:
    (ma, sa), (mb, sb) = a, b
    se = math.hypot(sa, sb)
    return Check(name, ma, mb, ma - mb, se, tolerance=3 * se, passed=bool(abs(ma - mb) <= 3 * se), **mc)


def cmd_evaluate_policy(spec, files):
    cm = _need(spec.control, "control", "evaluate-policy")
    m, run = spec.model, spec.run
    t, x = run.start
    _, _, policy = _policy(spec, run.step)
    files["policy.csv"] = _csv_text(policy.write_csv)
    mc = dict(n_paths=run.n_paths, seed=run.seed)
    direct = cost_direct(m, cm, policy, t, x, run.n_paths, run.seed)
    rew = cost_reweighted(m, cm, policy, t, x, run.n_paths, run.seed)
    exact = float(policy_cost_exact(m, cm, policy, t)[x])
    return [
        Check("cost_direct", direct[0], se=direct[1], **mc),
        Check("cost_reweighted", rew[0], se=rew[1], **mc),
        _agreement("estimator_agreement", direct, rew, **mc),
        _agreement("direct_vs_exact", direct, (exact, 0.0), **mc),
    ]


def _energy_problem(spec: ProblemSpec):
    """A linear problem for the energy identity: the spec's own driver when it
    depends on neither ``y`` nor ``z``, otherwise the unit source."""
    drv = spec.driver
    if isinstance(drv, ZeroDriver):
        return np.zeros((1, spec.model.n))
    if isinstance(drv, AffineDriver) and not drv.b.any() and not drv.c.any():
        return drv.source()
    return np.ones((1, spec.model.n))


def cmd_verify(spec, files):
    m, run = spec.model, spec.run
    t, x = run.start
    h = run.step
    if spec.driver is None and spec.control is not None:
        driver, g = HamiltonianDriver(m, spec.control), spec.control.g
    else:
        driver, g = _need(spec.driver, "driver", "verify"), spec.g
    vf = solve_kolmogorov(m, driver, g, h)
    mc = dict(n_paths=run.n_paths, seed=run.seed)
    checks = []

    # pathwise identities on a fixed number of paths
    n_bsde = min(BSDE_PATHS, run.n_paths)
    table = NodeIntegrand(m, vf, kolmogorov_integrand(m, driver))
    worst_bsde = worst_ito = 0.0
    for rng in path_generators(run.seed, n_bsde):
        path = simulate_path(m, t, x, rng)
        worst_bsde = max(worst_bsde, bsde_residual(m, driver, vf, path, g, table))
        worst_ito = max(worst_ito, verify_ito(m, vf, path))
    path_mc = dict(n_paths=n_bsde, seed=run.seed)
    checks.append(at_most("bsde_residual", worst_bsde, BSDE_TOL * max(1.0, (h / 1e-3) ** 2), **path_mc))
    checks.append(at_most("ito_formula", worst_ito, 10.0 * h * h, **path_mc))

    src = _energy_problem(spec)
    vf_lin = solve_kolmogorov(m, AffineDriver(m.n, a=src), g, h)
    for beta in (0.0, 2.0):
        e = energy_identity_gap(m, vf_lin, src, t, x, beta, run.n_paths, run.seed)
        checks.append(Check(f"energy_identity_beta_{beta:g}", e.lhs, e.rhs, e.gap, e.se,
                            tolerance=3 * e.se, passed=bool(abs(e.gap) <= 3 * e.se), **mc))

    batch = simulate_batch(m, t, x, run.n_paths, run.seed)
    integrands = (
        ("compensator_unit", lambda s, y, z: 1.0, dict(piecewise_constant=True)),
        ("compensator_z", lambda s, y, z: vf(s, y) - vf(s, z), dict(h_quad=run.h_quad)),
    )
    for name, H, quad in integrands:
        p, nu = batch_integrals(m, batch, H, **quad)
        q, se = mean_and_se(p - nu)
        checks.append(Check(name, float(np.mean(p)), float(np.mean(nu)), q, se, tolerance=3 * se,
                            passed=bool(abs(q) <= 3 * se), **mc))

    if spec.control is not None:
        cm = spec.control
        vf_hjb, extracted, policy = _policy(spec, h)
        wm, wse = weight_mean(m, cm, policy, t, x, run.n_paths, run.seed)
        checks.append(Check("girsanov_mean", wm, 1.0, wm - 1.0, wse, tolerance=3 * wse,
                            passed=bool(abs(wm - 1.0) <= 3 * wse), **mc))
        fg = fundamental_gap(m, cm, policy, vf_hjb, t, x, run.n_paths, run.seed)
        if policy == extracted:
            tol = max(3 * fg.se, 10 * h)
            checks.append(Check("fundamental_gap", fg.gap, 0.0, fg.gap, fg.se, tolerance=tol,
                                passed=bool(abs(fg.gap) <= tol), **mc))
        else:
            checks.append(Check("fundamental_gap", fg.gap, 0.0, fg.gap, fg.se, tolerance=3 * fg.se,
                                passed=bool(fg.gap <= 3 * fg.se), **mc))
        v0 = vf_hjb(t, x)
        checks.append(Check("fundamental_relation", v0, fg.cost + fg.gap, fg.identity_mean, fg.identity_se,
                            tolerance=3 * fg.identity_se,
                            passed=bool(abs(fg.identity_mean) <= 3 * fg.identity_se), **mc))
        checks.append(at_most("gap_integrand_nonpositive", fg.max_integrand, GAP_INTEGRAND_TOL, **mc))
    return checks


def cmd_reduce(spec, files):
    red = _need(spec.reduction, "reduction", "reduce")
    m = spec.model
    r, C_r = reduce_model(red.lam_u, red.pi_u, m)
    n_actions = r.shape[-1]
    rows = ["cell_index,from_state,to_state,action,r"]
    for k, x, y, u in np.ndindex(r.shape):
        rows.append(f"{k},{x},{y},{u},{fmt_float(r[k, x, y, u])}")
    files["r.csv"] = "\n".join(rows) + "\n"

    # rebuild the action-dependent rates from r and reduce again
    cm = ControlModel(n_actions, r, np.zeros((m.n_cells, m.n, n_actions)), np.zeros(m.n))
    lam_u, pi_u = controlled_rate_tables(m, cm)
    r2, _ = reduce_model(lam_u, pi_u, m)
    mask = np.broadcast_to((m.nu > 0)[..., None], r.shape)
    diff = float(np.abs(r2 - r)[mask].max()) if mask.any() else 0.0
    rates_diff = float(np.abs(lam_u - red.lam_u).max())
    return [
        Check("C_r", C_r, passed=True),
        at_most("round_trip", diff, 1e-12),
        at_most("rates_reproduced", rates_diff, 1e-12 * max(1.0, float(red.lam_u.max()))),
    ]


HANDLERS = {
    "solve": cmd_solve,
    "solve-hjb": cmd_solve_hjb,
    "simulate": cmd_simulate,
    "evaluate-policy": cmd_evaluate_policy,
    "verify": cmd_verify,
    "reduce": cmd_reduce,
}


def apply_overrides(spec: ProblemSpec, overrides: dict) -> ProblemSpec:
    run = replace(spec.run, **{k: v for k, v in overrides.items() if v is not None})
    if run.n_paths < 2:
        raise ValidationError("n_paths must be at least 2", "run.n_paths")
    if not (run.step > 0 and math.isfinite(run.step)):
        raise BadGrid(f"step must be positive, got {run.step}", "run.step")
    return replace(spec, run=run)


def run(command: str, spec: ProblemSpec, overrides: dict | None = None,
        timing: bool = False) -> tuple[RunReport, dict[str, str]]:
    """Execute one command; returns the report and the data files as ``name -> text``."""
    if command not in HANDLERS:
        raise ValueError(f"unknown command {command!r}")
    spec = apply_overrides(spec, overrides or {})
    files: dict[str, str] = {}
    t0 = time.perf_counter()
    checks = HANDLERS[command](spec, files)
    elapsed = time.perf_counter() - t0
    r = spec.run
    params = {"n_paths": r.n_paths, "step": r.step, "start": [r.start[0], r.start[1]], "h_quad": r.h_quad}
    report = RunReport(command, spec.digest, r.seed, params, elapsed if timing else None,
                       sorted(files), checks)
    return report, files


def _start(text: str) -> tuple[float, int]:
    try:
        t, x = text.split(",")
        return float(t), int(x)
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected T,X (for example 0.5,1), got {text!r}") from None


def build_parser() -> argparse.ArgumentParser:
    codes = "\n".join(f"  {code:>3}  {text}" for code, text in EXIT_CODES)
    p = argparse.ArgumentParser(
        prog="purejump",
        description="Solve and verify backward equations for pure-jump Markov processes.",
        formatter_class=argparse.RawDescriptionHelpFormatter,
        epilog=(
            "commands:\n"
            "  solve            value function of the spec's driver (value.csv)\n"
            "  solve-hjb        HJB value function and feedback policy (value.csv, policy.csv)\n"
            "  simulate         sample paths from the start point (paths.csv)\n"
            "  evaluate-policy  direct and reweighted cost of a policy (policy.csv)\n"
            "  verify           pathwise and Monte Carlo identity checks\n"
            "  reduce           control densities from action-dependent rates (r.csv)\n"
            "\nexit codes:\n" + codes),
    )
    p.add_argument("command", choices=COMMANDS, metavar="command", help="one of: " + ", ".join(COMMANDS))
    p.add_argument("--spec", required=True, type=Path, help="problem spec JSON file")
    p.add_argument("--seed", type=int, help="random seed (overrides run.seed)")
    p.add_argument("--paths", type=int, dest="n_paths", help="Monte Carlo paths (overrides run.n_paths)")
    p.add_argument("--step", type=float, help="time step h (overrides run.step)")
    p.add_argument("--start", type=_start, help="start point T,X (overrides run.start)")
    p.add_argument("--out", type=Path, default=Path("."), help="output directory (default: .)")
    p.add_argument("--format", choices=("csv", "json"), default="json", help="report format (default: json)")
    p.add_argument("--timing", action="store_true",
                   help="record wall-clock time in the report (makes reports differ between runs)")
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0) and EXIT_USAGE
    try:
        spec = load_spec(args.spec)
        overrides = {"seed": args.seed, "n_paths": args.n_paths, "step": args.step, "start": args.start}
        report, files = run(args.command, spec, overrides, timing=args.timing)
        for name, text in files.items():
            write_text(args.out / name, text)
        path = emit(report, args.format, args.out)
    except PureJumpError as exc:
        print(f"purejump: error: {exc}", file=sys.stderr)
        return exc.exit_code
    failed = [c.name for c in report.checks if not c.passed]
    for name in failed:
        print(f"purejump: check failed: {name}", file=sys.stderr)
    print(path)
    return EXIT_CHECK_FAILED if failed else 0


if __name__ == "__main__":
    sys.exit(main())
