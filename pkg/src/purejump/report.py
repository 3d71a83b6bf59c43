"""Run reports and their CSV/JSON serialization.

JSON reports are one object with keys in this order::

    command, spec_hash, seed, parameters, timing, outputs, checks

and each check is an object with keys in :data:`CHECK_FIELDS` order.  CSV
reports hold one row per check, columns :data:`CSV_COLUMNS`.
"""

from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import dataclass, field
from pathlib import Path

from .errors import IoError, ParseError
from .textio import fmt_float

CHECK_FIELDS = ("check_name", "lhs", "rhs", "gap", "se", "n_paths", "seed", "tolerance", "pass")
REPORT_FIELDS = ("command", "spec_hash", "seed", "parameters", "timing", "outputs", "checks")
CSV_COLUMNS = ("command", "spec_hash") + CHECK_FIELDS


def _num(x):
    if x is None:
        return None
    x = float(x)
    return x if math.isfinite(x) else None


@dataclass(frozen=True)
class Check:
    """One verified quantity.  Monte Carlo checks carry ``se`` and ``n_paths``."""

    name: str
    lhs: float | None
    rhs: float | None = None
    gap: float | None = None
    se: float | None = None
    n_paths: int | None = None
    seed: int | None = None
    tolerance: float | None = None
    passed: bool = True

    def to_dict(self) -> dict:
        return {
            "check_name": self.name,
            "lhs": _num(self.lhs),
            "rhs": _num(self.rhs),
            "gap": _num(self.gap),
            "se": _num(self.se),
            "n_paths": None if self.n_paths is None else int(self.n_paths),
            "seed": None if self.seed is None else int(self.seed),
            "tolerance": _num(self.tolerance),
            "pass": bool(self.passed),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "Check":
        return cls(d["check_name"], d["lhs"], d["rhs"], d["gap"], d["se"], d["n_paths"], d["seed"],
                   d["tolerance"], d["pass"])


def within(name: str, lhs: float, rhs: float, tol: float, **kw) -> Check:
    """``|lhs - rhs| <= tol``."""
    gap = float(lhs) - float(rhs)
    return Check(name, float(lhs), float(rhs), gap, tolerance=float(tol), passed=bool(abs(gap) <= tol), **kw)


def at_most(name: str, value: float, tol: float, **kw) -> Check:
    """``value <= tol``; used for residuals and defects."""
    return Check(name, float(value), float(tol), float(value) - float(tol), tolerance=float(tol),
                 passed=bool(value <= tol), **kw)


@dataclass
class RunReport:
    command: str
    spec_hash: str
    seed: int
    parameters: dict = field(default_factory=dict)
    timing: float | None = None
    outputs: list[str] = field(default_factory=list)
    checks: list[Check] = field(default_factory=list)

    @property
    def passed(self) -> bool:
        return all(c.passed for c in self.checks)

    def to_dict(self) -> dict:
        return {
            "command": self.command,
            "spec_hash": self.spec_hash,
            "seed": int(self.seed),
            "parameters": self.parameters,
            "timing": self.timing,
            "outputs": list(self.outputs),
            "checks": [c.to_dict() for c in self.checks],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "RunReport":
        missing = [k for k in REPORT_FIELDS if k not in d]
        if missing:
            raise ParseError(f"report lacks key '{missing[0]}'")
        return cls(d["command"], d["spec_hash"], d["seed"], d["parameters"], d["timing"],
                   list(d["outputs"]), [Check.from_dict(c) for c in d["checks"]])


def report_json(report: RunReport) -> str:
    return json.dumps(report.to_dict(), indent=2) + "\n"


def report_csv(report: RunReport) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(CSV_COLUMNS)
    for c in report.checks:
        d = c.to_dict()
        row = [report.command, report.spec_hash]
        for key in CHECK_FIELDS:
            val = d[key]
            if val is None:
                row.append("")
            elif isinstance(val, bool):
                row.append("true" if val else "false")
            elif isinstance(val, float):
                row.append(fmt_float(val))
            else:
                row.append(val)
        w.writerow(row)
    return buf.getvalue()


def emit(report: RunReport, fmt: str, out_dir) -> Path:
    """Write ``report.json`` or ``report.csv`` into ``out_dir`` and return its path."""
    if fmt not in ("csv", "json"):
        raise ValueError(f"unknown format {fmt!r}")
    text = report_json(report) if fmt == "json" else report_csv(report)
    path = Path(out_dir) / f"report.{fmt}"
    write_text(path, text)
    return path


def write_text(path: Path, text: str) -> None:
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        with open(path, "w", newline="", encoding="utf-8") as fh:
            fh.write(text)
    except OSError as exc:
        raise IoError(f"cannot write {path}: {exc.strerror or exc}") from None
