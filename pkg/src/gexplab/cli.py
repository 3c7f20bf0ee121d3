"""Command-line experiment runner.

    gexp <command> --config <path> [--out <dir>] [--seed <n>] [--levels <k>]

Commands: gheat, expectation, simulate, bsde, value, hjb, compare,
dpp-check, regularity, rate-study.  Every run writes a summary.json with
the same top-level keys plus the command's CSV artifacts.  Exit status:
0 all declared tolerances pass, 1 a tolerance fails, 2 the config does not
parse, 3 the config fails validation.
"""

from __future__ import annotations

import argparse
import math
import sys
import time
from pathlib import Path

import numpy as np

from .bsde import k_martingale_check, solve_gbsde
from .config import COMMANDS, ConfigParseError, ConfigValidationError, ExperimentConfig
from .dpp import dpp_consistency_check, regularity_report, value_function
from .gheat import solve_g_heat
from .hjb import (
    dpp_hjb_distance,
    hjb_cfl_number,
    offset_gap,
    quadratic_test_function,
    solve_hjb,
    viscosity_residual,
)
from .lattice import VolatilityLattice, VolatilityScenario, constant_control, simulate_gsde
from .model import CatalogError, CflError, GFunction, GridSpec, UncertaintySet
from . import output

__all__ = ["main", "run", "rate_study"]


def _check(name: str, value: float, tolerance: float, passed: bool) -> dict:
    return {"name": name, "value": value, "tolerance": tolerance, "passed": bool(passed)}


def _centre_probe(p, g_fun, field):
    """Operator probe with a quadratic fitted to the solved field's centre."""
    from .hjb import operator_probe, quadratic_test_function

    grid = field.grid
    i = grid.x_steps // 2
    xs = grid.x_nodes()
    u = field.values
    du = (u[0, i + 1] - u[0, i - 1]) / (2.0 * grid.dx)
    d2u = (u[0, i + 1] - 2.0 * u[0, i] + u[0, i - 1]) / grid.dx**2
    ut = (u[1, i] - u[0, i]) / grid.dt
    phi = quadratic_test_function(0.0, xs[i], float(u[0, i]), float(ut), float(du), float(d2u))
    return operator_probe(p, g_fun, phi, 0.0, float(xs[i]))


def _shrink_ok(coarse: float, fine: float, ratio: float, floor: float) -> bool:
    # A pair already at the rounding floor counts as shrunk.
    return fine <= max(coarse / ratio, floor)


# ---------------------------------------------------------------------------
# Command handlers: each returns (results, checks, artifacts)
# ---------------------------------------------------------------------------


def _cmd_gheat(cfg: ExperimentConfig):
    g_fun = cfg.g_function()
    field = solve_g_heat(g_fun, cfg.payoff(), cfg.t_end, cfg.grid, payoff_label=cfg.payoff_name)
    value = field.value_at(cfg.t_end, 0.0)
    results = {
        "value_at_origin": value,
        "t_end": cfg.t_end,
        "cfl_number": cfg.grid.cfl_number(cfg.uncertainty.sigma_max_sq),
    }
    checks = []
    if cfg.expect is not None:
        tol = cfg.expect_tol if cfg.expect_tol is not None else cfg.tolerances["expectation"]
        err = abs(value - cfg.expect)
        checks.append(_check("value_vs_expected", err, tol, err <= tol))
    art = [output.write_heat_csv(cfg.out_dir / "field.csv", field)]
    return results, checks, art


def _cmd_expectation(cfg: ExperimentConfig):
    g_fun = cfg.g_function()
    field = solve_g_heat(g_fun, cfg.payoff(), 1.0, cfg.grid, payoff_label=cfg.payoff_name)
    value = field.value_at(1.0, 0.0)
    results = {"expectation": value, "payoff": cfg.payoff_name}
    checks = []
    if cfg.expect is not None:
        tol = cfg.expect_tol if cfg.expect_tol is not None else cfg.tolerances["expectation"]
        err = abs(value - cfg.expect)
        checks.append(_check("expectation_vs_expected", err, tol, err <= tol))
    art = [output.write_heat_csv(cfg.out_dir / "field.csv", field)]
    return results, checks, art


def _cmd_simulate(cfg: ExperimentConfig):
    p = cfg.problem()
    level = cfg.uncertainty.sigma_min_sq if cfg.scenario == "min" else cfg.uncertainty.sigma_max_sq
    scenario = VolatilityScenario.constant(cfg.uncertainty, level, cfg.grid.t_steps)
    control = constant_control(cfg.control_value if cfg.control_value is not None else p.control_set[0])
    bundle = simulate_gsde(p, scenario, control, cfg.n_paths, cfg.seed, x0=cfg.x0)
    terminal = bundle.X[:, -1]
    results = {
        "n_paths": cfg.n_paths,
        "terminal_mean": float(np.mean(terminal)),
        "terminal_std": float(np.std(terminal)),
        "scenario": bundle.scenario_label,
    }
    art = [output.write_paths_csv(cfg.out_dir / "paths.csv", bundle)]
    return results, [], art


def _cmd_bsde(cfg: ExperimentConfig):
    p = cfg.problem()
    lattice = VolatilityLattice(cfg.grid, cfg.uncertainty)
    control = constant_control(cfg.control_value if cfg.control_value is not None else p.control_set[0])
    terminal = np.broadcast_to(np.asarray(p.phi(lattice.x), dtype=float), lattice.x.shape)
    sol = solve_gbsde(p, control, lattice, terminal, terminal_label="phi")
    dk_pos = sol.max_positive_increment()
    mart = k_martingale_check(sol, lattice)
    results = {"y_root": sol.y0, "max_positive_dk": dk_pos, "k_martingale_residual": mart}
    checks = [
        _check("k_increments_nonpositive", dk_pos, cfg.tolerances["k_increment"], dk_pos <= cfg.tolerances["k_increment"]),
        _check("k_martingale_identity", mart, cfg.tolerances["k_martingale"], mart <= cfg.tolerances["k_martingale"]),
    ]
    art = [output.write_bsde_csv(cfg.out_dir / "field.csv", sol)]
    return results, checks, art


def _cmd_value(cfg: ExperimentConfig):
    p = cfg.problem()
    lattice = VolatilityLattice(cfg.grid, cfg.uncertainty)
    field = value_function(p, lattice)
    res_one = dpp_consistency_check(p, lattice, field, [1])[1]
    results = {"root_value": field.root_value(), "one_step_residual": res_one}
    tol = cfg.tolerances["dpp_one_step"]
    checks = [_check("dpp_one_step_residual", res_one, tol, res_one <= tol)]
    art = [output.write_field_csv(cfg.out_dir / "field.csv", field, controls=p.control_set)]
    return results, checks, art


def _cmd_hjb(cfg: ExperimentConfig):
    p = cfg.problem()
    g_fun = cfg.g_function()
    field = solve_hjb(p, g_fun, cfg.grid)
    res = viscosity_residual(field, p, g_fun)
    results = {
        "root_value": field.root_value(),
        "self_residual_max": res.max_abs,
        "stability_number": hjb_cfl_number(p, g_fun, cfg.grid),
        "operator_probe": _centre_probe(p, g_fun, field).as_dict(),
    }
    tol = cfg.tolerances["hjb_residual"]
    checks = [_check("hjb_self_residual", res.max_abs, tol, res.max_abs <= tol)]
    art = [
        output.write_field_csv(cfg.out_dir / "field.csv", field, controls=p.control_set),
        output.write_rates_csv(
            cfg.out_dir / "rates.csv",
            ("k", "t", "max_residual"),
            [(k, k * cfg.grid.dt, r) for k, r in enumerate(res.per_layer)],
        ),
    ]
    return results, checks, art


def _cmd_compare(cfg: ExperimentConfig):
    p = cfg.problem()
    g_fun = cfg.g_function()
    grids = [cfg.grid]
    for _ in range(cfg.levels - 1):
        grids.append(grids[-1].halved())
    distances = []
    fields = None
    for grid in grids:
        dist, fd, fh = dpp_hjb_distance(p, g_fun, grid)
        distances.append(dist)
        if fields is None:
            fields = (fd, fh)
    results = {
        "distances": distances,
        "refinement_ratio": (distances[0] / distances[1]) if len(distances) > 1 and distances[1] > 0 else None,
    }
    tol = cfg.tolerances["compare_distance"]
    checks = [_check("dpp_hjb_distance", distances[0], tol, distances[0] <= tol)]
    if len(distances) > 1:
        ok = all(
            _shrink_ok(distances[i], distances[i + 1], cfg.tolerances["compare_ratio"], cfg.tolerances["shrink_floor"])
            for i in range(len(distances) - 1)
        )
        checks.append(_check("dpp_hjb_shrink", distances[-1], cfg.tolerances["compare_ratio"], ok))
    art = [
        output.write_field_csv(cfg.out_dir / "field.csv", fields[0], controls=p.control_set),
        output.write_field_csv(cfg.out_dir / "field_hjb.csv", fields[1], controls=p.control_set),
        output.write_rates_csv(
            cfg.out_dir / "rates.csv",
            ("level", "t_steps", "x_steps", "distance"),
            [(i, g.t_steps, g.x_steps, d) for i, (g, d) in enumerate(zip(grids, distances))],
        ),
    ]
    return results, checks, art


def _cmd_dpp_check(cfg: ExperimentConfig):
    p = cfg.problem()
    lattice = VolatilityLattice(cfg.grid, cfg.uncertainty)
    field = value_function(p, lattice)
    residuals = dpp_consistency_check(p, lattice, field, list(cfg.deltas))
    results = {"residuals": {str(k): v for k, v in residuals.items()}}
    checks = []
    if 1 in residuals:
        tol = cfg.tolerances["dpp_one_step"]
        checks.append(_check("dpp_one_step_residual", residuals[1], tol, residuals[1] <= tol))
    d_max = max(cfg.deltas)
    if d_max != 1:
        tol = cfg.tolerances["dpp_multi"]
        checks.append(_check(f"dpp_residual_delta_{d_max}", residuals[d_max], tol, residuals[d_max] <= tol))
    art = [
        output.write_rates_csv(
            cfg.out_dir / "rates.csv", ("delta_steps", "residual"), sorted(residuals.items())
        )
    ]
    return results, checks, art


def _cmd_regularity(cfg: ExperimentConfig):
    p = cfg.problem()
    grids = [cfg.grid]
    for _ in range(cfg.levels - 1):
        grids.append(grids[-1].halved())
    records = []
    for grid in grids:
        lattice = VolatilityLattice(grid, cfg.uncertainty)
        field = value_function(p, lattice)
        records.append(regularity_report(field))
    results = {"moduli": [r.as_dict() for r in records]}
    checks = []
    if len(records) > 1:
        factor = cfg.tolerances["regularity_factor"]
        worst = 1.0
        for a, b in zip(records, records[1:]):
            for va, vb in ((a.lipschitz_x, b.lipschitz_x), (a.holder_t, b.holder_t)):
                if max(va, vb) <= 1e-12:
                    continue
                worst = max(worst, max(va, vb) / max(min(va, vb), 1e-300))
        checks.append(_check("moduli_stability_factor", worst, factor, worst <= factor))
    art = [
        output.write_rates_csv(
            cfg.out_dir / "rates.csv",
            ("level", "t_steps", "x_steps", "lipschitz_x", "holder_t", "growth_ratio"),
            [
                (i, g.t_steps, g.x_steps, r.lipschitz_x, r.holder_t, r.growth_ratio)
                for i, (g, r) in enumerate(zip(grids, records))
            ],
        )
    ]
    return results, checks, art


# ---------------------------------------------------------------------------
# Rate studies
# ---------------------------------------------------------------------------


def rate_study(cfg: ExperimentConfig):
    """Refinement table plus least-squares log-log slope for one study.

    Studies: 'gheat' (heat refinement on the convex ramp payoff against the
    Gaussian closed form), 'degenerate-heat' (single-volatility cosine
    payoff against the exact Gaussian value), 'lemma45' (gap between the
    moving and frozen offset equations over the configured window list).
    """
    g_fun = cfg.g_function()
    levels = max(cfg.levels, 3)
    if cfg.study == "gheat":
        sigma_bar = math.sqrt(cfg.uncertainty.sigma_max_sq)
        exact = sigma_bar / math.sqrt(2.0 * math.pi)
        payoff = lambda x: np.maximum(x, 0.0)
        rows = []
        grid = cfg.grid
        for lvl in range(levels):
            field = solve_g_heat(g_fun, payoff, 1.0, grid)
            err = abs(field.value_at(1.0, 0.0) - exact)
            rows.append((grid.dx, err))
            grid = GridSpec(
                t_steps=grid.t_steps * 4,
                dt=grid.dt / 4.0,
                x_min=grid.x_min,
                x_max=grid.x_max,
                x_steps=grid.x_steps * 2,
                vol_levels=grid.vol_levels,
            )
        xs = np.log([r[0] for r in rows])
        ys = np.log([max(r[1], 1e-300) for r in rows])
        slope = float(np.polyfit(xs, ys, 1)[0])
        return rows, slope

    if cfg.study == "degenerate-heat":
        sig_sq = cfg.uncertainty.sigma_max_sq
        degenerate = UncertaintySet(sig_sq, sig_sq)
        g_deg = GFunction(degenerate)
        exact = math.exp(-0.5 * sig_sq)
        rows = []
        grid = cfg.grid
        for lvl in range(levels):
            field = solve_g_heat(g_deg, np.cos, 1.0, grid)
            err = abs(field.value_at(1.0, 0.0) - exact)
            rows.append((grid.dx, err))
            grid = GridSpec(
                t_steps=grid.t_steps * 4,
                dt=grid.dt / 4.0,
                x_min=grid.x_min,
                x_max=grid.x_max,
                x_steps=grid.x_steps * 2,
                vol_levels=grid.vol_levels,
            )
        xs = np.log([r[0] for r in rows])
        ys = np.log([max(r[1], 1e-300) for r in rows])
        slope = float(np.polyfit(xs, ys, 1)[0])
        return rows, slope

    # lemma45: |Y1 - Y2| over the window list, against the window length.
    p = cfg.problem()
    phi = quadratic_test_function(
        t0=cfg.study_t0, x0=cfg.study_x0, value=1.1, slope_t=-0.2, slope_x=0.6, curvature=0.8
    )
    rows = []
    for delta in cfg.study_deltas:
        gap = offset_gap(p, g_fun, phi, cfg.study_t0, cfg.study_x0, delta, v=cfg.study_control)
        rows.append((delta, gap))
    xs = np.log([r[0] for r in rows])
    ys = np.log([max(r[1], 1e-300) for r in rows])
    slope = float(np.polyfit(xs, ys, 1)[0])
    return rows, slope


def _cmd_rate_study(cfg: ExperimentConfig):
    rows, slope = rate_study(cfg)
    results = {"study": cfg.study, "slope": slope, "table": [list(r) for r in rows]}
    checks = []
    if cfg.study == "lemma45":
        tol = cfg.tolerances["rate_lemma45"]
        checks.append(_check("lemma45_slope", slope, tol, slope >= tol))
    elif cfg.study == "gheat":
        ratios = [rows[i][1] / max(rows[i + 1][1], 1e-300) for i in range(len(rows) - 1)]
        worst = min(ratios)
        tol = cfg.tolerances["rate_gheat"]
        checks.append(_check("gheat_refinement_ratio", worst, tol, worst >= tol))
    else:
        lo, hi = cfg.tolerances["rate_degenerate_lo"], cfg.tolerances["rate_degenerate_hi"]
        checks.append(_check("degenerate_heat_slope", slope, lo, lo <= slope <= hi))
    label = "delta" if cfg.study == "lemma45" else "dx"
    art = [output.write_rates_csv(cfg.out_dir / "rates.csv", (label, "error"), rows)]
    return results, checks, art


_HANDLERS = {
    "gheat": _cmd_gheat,
    "expectation": _cmd_expectation,
    "simulate": _cmd_simulate,
    "bsde": _cmd_bsde,
    "value": _cmd_value,
    "hjb": _cmd_hjb,
    "compare": _cmd_compare,
    "dpp-check": _cmd_dpp_check,
    "regularity": _cmd_regularity,
    "rate-study": _cmd_rate_study,
}


def run(cfg: ExperimentConfig) -> int:
    """Validate, dispatch, write artifacts; returns the exit status."""
    try:
        cfg.validate()
    except (ConfigValidationError, CflError, CatalogError) as exc:
        print(f"validation error: {exc}", file=sys.stderr)
        return 3
    t0 = time.perf_counter()
    results, checks, artifacts = _HANDLERS[cfg.command](cfg)
    runtime = time.perf_counter() - t0
    passed = all(c["passed"] for c in checks)
    summary = {
        "command": cfg.command,
        "inputs": cfg.echo(),
        "results": results,
        "checks": checks,
        "passed": passed,
        "runtime_seconds": runtime,
        "artifacts": [str(a) for a in artifacts],
    }
    output.write_summary_json(cfg.out_dir / "summary.json", summary)
    for c in checks:
        status = "pass" if c["passed"] else "FAIL"
        print(f"[{status}] {c['name']}: {c['value']:.6g} (tolerance {c['tolerance']:g})")
    print(f"{cfg.command}: wrote {cfg.out_dir / 'summary.json'} ({runtime:.2f}s)")
    return 0 if passed else 1


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(
        prog="gexp", description="volatility-uncertainty control laboratory"
    )
    parser.add_argument("command", choices=COMMANDS)
    parser.add_argument("--config", required=True, help="experiment config file")
    parser.add_argument("--out", default=None, help="output directory")
    parser.add_argument("--seed", type=int, default=None)
    parser.add_argument("--levels", type=int, default=None, help="refinement levels")
    args = parser.parse_args(argv)
    try:
        cfg = ExperimentConfig.from_file(
            args.config, command=args.command, out_dir=args.out, seed=args.seed, levels=args.levels
        )
    except ConfigParseError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    return run(cfg)


if __name__ == "__main__":
    sys.exit(main())
