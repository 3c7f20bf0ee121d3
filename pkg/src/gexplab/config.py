"""Experiment configuration: flat key-value files with one section per module.

The format is INI-style (configparser) with no nesting.  Every tolerance
has a default pinned to the acceptance values of the test suite; configs
override them explicitly.  Parse errors (unreadable file, bad literals) and
validation errors (unknown catalog names, unstable grids) are distinct so
the command line can map them to different exit codes.
"""

from __future__ import annotations

import configparser
from dataclasses import dataclass, field as dc_field
from pathlib import Path

from .model import (
    CATALOG_NAMES,
    PAYOFF_NAMES,
    CatalogError,
    CflError,
    GFunction,
    GridSpec,
    UncertaintySet,
    catalog_problem,
    payoff_function,
)

__all__ = ["ConfigParseError", "ConfigValidationError", "ExperimentConfig", "COMMANDS"]

COMMANDS = (
    "gheat",
    "expectation",
    "simulate",
    "bsde",
    "value",
    "hjb",
    "compare",
    "dpp-check",
    "regularity",
    "rate-study",
)

DEFAULT_TOLERANCES = {
    "expectation": 2e-2,
    "compare_distance": 5e-2,
    "compare_ratio": 1.5,
    "shrink_floor": 1e-9,
    "dpp_one_step": 1e-12,
    "dpp_multi": 5e-3,
    "k_increment": 1e-12,
    "k_martingale": 1e-10,
    "hjb_residual": 1e-12,
    "regularity_factor": 2.0,
    "rate_lemma45": 1.4,
    "rate_gheat": 1.5,
    "rate_degenerate_lo": 1.5,
    "rate_degenerate_hi": 2.5,
}

_PROBLEM_PARAM_KEYS = ("phi", "phi_scale", "clamp", "horizon", "n_controls", "sigma0", "c0", "c1", "kappa")
_INT_PARAMS = ("n_controls",)
_STR_PARAMS = ("phi",)


class ConfigParseError(ValueError):
    """The config file cannot be read or a literal cannot be parsed."""


class ConfigValidationError(ValueError):
    """The config parses but names an unknown entity or an unstable grid."""


@dataclass
class ExperimentConfig:
    command: str
    uncertainty: UncertaintySet
    grid: GridSpec
    problem_name: str = "pure-gbm"
    problem_params: dict = dc_field(default_factory=dict)
    payoff_name: str = "square"
    payoff_scale: float = 1.0
    payoff_clamp: float = 100.0
    t_end: float = 1.0
    scenario: str = "max"
    n_paths: int = 1000
    x0: float = 0.0
    control_value: float | None = None
    deltas: tuple = (1, 10)
    study: str = "gheat"
    study_t0: float = 0.2
    study_x0: float = 0.3
    study_control: float = 0.5
    study_deltas: tuple = (0.02, 0.01, 0.005, 0.0025)
    expect: float | None = None
    expect_tol: float | None = None
    seed: int = 0
    out_dir: Path = Path("out")
    levels: int = 1
    tolerances: dict = dc_field(default_factory=lambda: dict(DEFAULT_TOLERANCES))
    source: str = "<inline>"

    # -- construction -------------------------------------------------------

    @staticmethod
    def from_file(
        path: str | Path,
        command: str | None = None,
        out_dir: str | None = None,
        seed: int | None = None,
        levels: int | None = None,
    ) -> "ExperimentConfig":
        path = Path(path)
        parser = configparser.ConfigParser()
        try:
            with open(path, "r", encoding="utf-8") as fh:
                parser.read_file(fh)
        except OSError as exc:
            raise ConfigParseError(f"cannot read config {path}: {exc}") from exc
        except configparser.Error as exc:
            raise ConfigParseError(f"malformed config {path}: {exc}") from exc

        def get(section, key, conv, default):
            if not parser.has_option(section, key):
                return default
            raw = parser.get(section, key)
            try:
                return conv(raw)
            except ValueError as exc:
                raise ConfigParseError(f"bad value for [{section}] {key}: {raw!r}") from exc

        try:
            uncertainty = UncertaintySet(
                sigma_min_sq=get("uncertainty", "sigma_min_sq", float, 0.5),
                sigma_max_sq=get("uncertainty", "sigma_max_sq", float, 1.0),
            )
        except ValueError as exc:
            raise ConfigParseError(str(exc)) from exc
        try:
            grid = GridSpec(
                t_steps=get("grid", "t_steps", int, 500),
                dt=get("grid", "dt", float, 2e-3),
                x_min=get("grid", "x_min", float, -6.0),
                x_max=get("grid", "x_max", float, 6.0),
                x_steps=get("grid", "x_steps", int, 240),
                vol_levels=get("grid", "vol_levels", int, 5),
            )
        except ValueError as exc:
            raise ConfigParseError(str(exc)) from exc

        params = {}
        if parser.has_section("problem"):
            for key in parser.options("problem"):
                if key == "name":
                    continue
                if key not in _PROBLEM_PARAM_KEYS:
                    raise ConfigParseError(f"unknown problem parameter '{key}'")
                if key in _STR_PARAMS:
                    params[key] = parser.get("problem", key)
                elif key in _INT_PARAMS:
                    params[key] = get("problem", key, int, None)
                else:
                    params[key] = get("problem", key, float, None)

        def floats_tuple(raw):
            return tuple(float(tok) for tok in raw.replace(",", " ").split())

        def ints_tuple(raw):
            return tuple(int(tok) for tok in raw.replace(",", " ").split())

        cmd = command or get("run", "command", str, None)
        if cmd is None:
            raise ConfigParseError("no command given (CLI argument or [run] command)")

        tolerances = dict(DEFAULT_TOLERANCES)
        if parser.has_section("tolerances"):
            for key in parser.options("tolerances"):
                if key not in tolerances:
                    raise ConfigParseError(f"unknown tolerance '{key}'")
                tolerances[key] = get("tolerances", key, float, tolerances[key])

        cfg = ExperimentConfig(
            command=cmd,
            uncertainty=uncertainty,
            grid=grid,
            problem_name=get("problem", "name", str, "pure-gbm"),
            problem_params=params,
            payoff_name=get("payoff", "phi", str, "square"),
            payoff_scale=get("payoff", "scale", float, 1.0),
            payoff_clamp=get("payoff", "clamp", float, 100.0),
            t_end=get("gheat", "t_end", float, 1.0),
            scenario=get("simulate", "scenario", str, "max"),
            n_paths=get("simulate", "n_paths", int, 1000),
            x0=get("simulate", "x0", float, 0.0),
            control_value=get("bsde", "control", float, get("simulate", "control", float, None)),
            deltas=get("dpp-check", "deltas", ints_tuple, (1, 10)),
            study=get("rate-study", "study", str, "gheat"),
            study_t0=get("rate-study", "t0", float, 0.2),
            study_x0=get("rate-study", "x0", float, 0.3),
            study_control=get("rate-study", "control", float, 0.5),
            study_deltas=get("rate-study", "deltas", floats_tuple, (0.02, 0.01, 0.005, 0.0025)),
            expect=get("check", "expect", float, None),
            expect_tol=get("check", "tol", float, None),
            seed=seed if seed is not None else get("run", "seed", int, 0),
            out_dir=Path(out_dir if out_dir is not None else get("run", "out", str, "out")),
            levels=levels if levels is not None else get("run", "levels", int, 1),
            tolerances=tolerances,
            source=str(path),
        )
        return cfg

    # -- validation ---------------------------------------------------------

    def g_function(self) -> GFunction:
        return GFunction(self.uncertainty)

    def problem(self):
        return catalog_problem(self.problem_name, self.problem_params)

    def payoff(self):
        return payoff_function(self.payoff_name, self.payoff_scale, self.payoff_clamp)

    def validate(self):
        """Semantic validation before any compute: names, CFL, ranges."""
        if self.command not in COMMANDS:
            raise ConfigValidationError(f"unknown command '{self.command}'")
        if self.levels < 1:
            raise ConfigValidationError("levels must be >= 1")
        if self.n_paths < 1:
            raise ConfigValidationError("n_paths must be >= 1")

        needs_problem = self.command in (
            "simulate",
            "bsde",
            "value",
            "hjb",
            "compare",
            "dpp-check",
            "regularity",
        ) or (self.command == "rate-study" and self.study == "lemma45")
        needs_payoff = self.command in ("gheat", "expectation")
        try:
            if needs_problem:
                self.problem()
            if needs_payoff:
                self.payoff()
        except CatalogError as exc:
            raise ConfigValidationError(str(exc)) from exc

        if self.command in ("gheat", "expectation", "bsde", "value", "dpp-check", "regularity", "compare"):
            try:
                self.grid.require_cfl(self.uncertainty)
            except CflError as exc:
                raise ConfigValidationError(str(exc)) from exc
        if self.command in ("hjb", "compare"):
            from .hjb import hjb_cfl_number

            number = hjb_cfl_number(self.problem(), self.g_function(), self.grid)
            if number > 1.0 + 1e-12:
                raise ConfigValidationError(
                    f"explicit PDE scheme unstable on this grid (stability number {number:.3f})"
                )
        if self.command == "simulate" and self.scenario not in ("min", "max"):
            raise ConfigValidationError(f"unknown scenario '{self.scenario}' (min or max)")
        if self.command == "rate-study":
            if self.study not in ("gheat", "degenerate-heat", "lemma45"):
                raise ConfigValidationError(f"unknown study '{self.study}'")
            if self.study in ("gheat", "degenerate-heat") and max(self.levels, 3) < 3:
                raise ConfigValidationError("rate studies need at least 3 levels")
        if self.command == "dpp-check":
            if any(d < 1 for d in self.deltas) or max(self.deltas) > self.grid.t_steps:
                raise ConfigValidationError("dpp-check deltas must lie in [1, t_steps]")

    def echo(self) -> dict:
        """Inputs echoed into the summary."""
        return {
            "source": self.source,
            "command": self.command,
            "seed": self.seed,
            "levels": self.levels,
            "uncertainty": {
                "sigma_min_sq": self.uncertainty.sigma_min_sq,
                "sigma_max_sq": self.uncertainty.sigma_max_sq,
            },
            "grid": {
                "t_steps": self.grid.t_steps,
                "dt": self.grid.dt,
                "x_min": self.grid.x_min,
                "x_max": self.grid.x_max,
                "x_steps": self.grid.x_steps,
                "vol_levels": self.grid.vol_levels,
            },
            "problem": {"name": self.problem_name, **self.problem_params},
            "payoff": {
                "phi": self.payoff_name,
                "scale": self.payoff_scale,
                "clamp": self.payoff_clamp,
            },
        }
