"""Machine-readable artifacts: CSV tables and the JSON run summary.

All floats are written with 12 significant digits through one formatter,
so identical inputs and seeds produce byte-identical CSV files.  The JSON
summary carries the same top-level keys for every command.
"""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np

from .bsde import BsdeSolution
from .dpp import ValueField
from .gheat import HeatField
from .lattice import PathBundle

__all__ = [
    "fmt",
    "write_field_csv",
    "write_heat_csv",
    "write_bsde_csv",
    "write_paths_csv",
    "write_rates_csv",
    "write_summary_json",
]


def fmt(x) -> str:
    return f"{float(x):.12g}"


def _write_lines(path: Path, lines) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for line in lines:
            fh.write(line)
            fh.write("\n")
    return path


def write_field_csv(path: Path, field: ValueField, controls=None) -> Path:
    """Rows (k, t, i, x, u, argmax_control); control blank on the terminal row."""
    xs = field.grid.x_nodes()
    dt = field.grid.dt
    lines = ["k,t,i,x,u,argmax_control"]
    for k in range(field.values.shape[0]):
        has_ctl = k < field.argmax_control.shape[0]
        for i in range(xs.size):
            ctl = ""
            if has_ctl:
                idx = int(field.argmax_control[k, i])
                ctl = fmt(controls[idx]) if controls is not None else str(idx)
            lines.append(
                f"{k},{fmt(k * dt)},{i},{fmt(xs[i])},{fmt(field.values[k, i])},{ctl}"
            )
    return _write_lines(path, lines)


def write_heat_csv(path: Path, field: HeatField) -> Path:
    xs = field.grid.x_nodes()
    dt = field.grid.dt
    lines = ["k,t,i,x,u"]
    for k in range(field.values.shape[0]):
        for i in range(xs.size):
            lines.append(f"{k},{fmt(k * dt)},{i},{fmt(xs[i])},{fmt(field.values[k, i])}")
    return _write_lines(path, lines)


def write_bsde_csv(path: Path, sol: BsdeSolution) -> Path:
    """Per-layer rows (k, t, i, x, y, z, gamma_star, max_dk_gap)."""
    xs = sol.lattice.x
    dt = sol.lattice.grid.dt
    lines = ["k,t,i,x,y,z,gamma_star,max_dk_gap"]
    steps = sol.z.shape[0]
    for k in range(steps):
        gap = np.min(sol.dk[k], axis=0)
        for i in range(xs.size):
            lines.append(
                f"{k},{fmt(k * dt)},{i},{fmt(xs[i])},{fmt(sol.y[k, i])},"
                f"{fmt(sol.z[k, i])},{int(sol.gamma_star[k, i])},{fmt(gap[i])}"
            )
    k = steps
    for i in range(xs.size):
        lines.append(f"{k},{fmt(k * dt)},{i},{fmt(xs[i])},{fmt(sol.y[k, i])},,,")
    return _write_lines(path, lines)


def write_paths_csv(path: Path, bundle: PathBundle) -> Path:
    """One row per (path, step); run labels in the leading comment block."""
    lines = [
        f"# seed={bundle.seed}",
        f"# scenario={bundle.scenario_label}",
        f"# control={bundle.control_label}",
        "path,step,t,x,b,qv",
    ]
    for p in range(bundle.n_paths):
        for k in range(bundle.n_steps + 1):
            lines.append(
                f"{p},{k},{fmt(bundle.t[k])},{fmt(bundle.X[p, k])},"
                f"{fmt(bundle.B[p, k])},{fmt(bundle.quad_var[p, k])}"
            )
    return _write_lines(path, lines)


def write_rates_csv(path: Path, columns, rows) -> Path:
    lines = [",".join(columns)]
    for row in rows:
        lines.append(",".join(fmt(v) if isinstance(v, (int, float, np.floating)) else str(v) for v in row))
    return _write_lines(path, lines)


def write_summary_json(path: Path, summary: dict) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(summary, fh, indent=2, sort_keys=True, default=_json_default)
        fh.write("\n")
    return path


def _json_default(obj):
    if isinstance(obj, (np.floating, np.integer)):
        return obj.item()
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    if isinstance(obj, Path):
        return str(obj)
    raise TypeError(f"not JSON serialisable: {type(obj)}")
