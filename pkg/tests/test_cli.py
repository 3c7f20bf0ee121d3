"""Command line: exit codes, artifacts, determinism, smoke matrix."""

import json
from pathlib import Path

import pytest

from gexplab.cli import main
from gexplab.model import CATALOG_NAMES


def write_config(path: Path, body: str) -> str:
    path.write_text(body, encoding="utf-8")
    return str(path)


BASE = """
[run]
seed = 0

[uncertainty]
sigma_min_sq = 0.5
sigma_max_sq = 1.0

[grid]
t_steps = 500
dt = 0.002
x_min = -6.0
x_max = 6.0
x_steps = 240
vol_levels = 5
"""

SMALL_GRID = """
[uncertainty]
sigma_min_sq = 0.5
sigma_max_sq = 1.0

[grid]
t_steps = 40
dt = 0.002
x_min = -2.0
x_max = 2.0
x_steps = 60
vol_levels = 3
"""


class TestExitCodes:
    def test_missing_config_is_parse_failure(self, tmp_path):
        assert main(["expectation", "--config", str(tmp_path / "nope.ini")]) == 2

    def test_bad_literal_is_parse_failure(self, tmp_path):
        cfg = write_config(tmp_path / "c.ini", "[grid]\ndt = banana\n")
        assert main(["expectation", "--config", cfg]) == 2

    def test_unknown_problem_is_validation_failure(self, tmp_path):
        cfg = write_config(tmp_path / "c.ini", SMALL_GRID + "\n[problem]\nname = no-such\n")
        assert main(["value", "--config", cfg, "--out", str(tmp_path / "o")]) == 3

    def test_cfl_violation_is_validation_failure(self, tmp_path):
        body = "[grid]\nt_steps = 10\ndt = 0.5\nx_min = -2\nx_max = 2\nx_steps = 60\n"
        cfg = write_config(tmp_path / "c.ini", body)
        assert main(["expectation", "--config", cfg, "--out", str(tmp_path / "o")]) == 3

    def test_failed_tolerance_is_status_one(self, tmp_path):
        cfg = write_config(tmp_path / "c.ini", BASE + "\n[payoff]\nphi = square\n[check]\nexpect = 99.0\ntol = 0.01\n")
        assert main(["expectation", "--config", cfg, "--out", str(tmp_path / "o")]) == 1


class TestExpectation:
    def test_convex_square_moment(self, tmp_path):
        cfg = write_config(
            tmp_path / "c.ini", BASE + "\n[payoff]\nphi = square\n[check]\nexpect = 1.0\n"
        )
        out = tmp_path / "out"
        assert main(["expectation", "--config", cfg, "--out", str(out)]) == 0
        summary = json.loads((out / "summary.json").read_text())
        assert abs(summary["results"]["expectation"] - 1.0) <= 2e-2
        assert summary["passed"] is True
        assert (out / "field.csv").exists()


class TestDeterminism:
    def test_simulate_twice_byte_identical(self, tmp_path):
        cfg = write_config(
            tmp_path / "c.ini",
            SMALL_GRID + "\n[problem]\nname = drift-control\nhorizon = 0.08\n[simulate]\nn_paths = 25\n",
        )
        rc1 = main(["simulate", "--config", cfg, "--seed", "11", "--out", str(tmp_path / "a")])
        rc2 = main(["simulate", "--config", cfg, "--seed", "11", "--out", str(tmp_path / "b")])
        assert rc1 == 0 and rc2 == 0
        a = (tmp_path / "a" / "paths.csv").read_bytes()
        b = (tmp_path / "b" / "paths.csv").read_bytes()
        assert a == b

    def test_value_field_csv_stable(self, tmp_path):
        cfg = write_config(
            tmp_path / "c.ini",
            SMALL_GRID + "\n[problem]\nname = quadratic-cell\nhorizon = 0.08\n",
        )
        main(["value", "--config", cfg, "--out", str(tmp_path / "a")])
        main(["value", "--config", cfg, "--out", str(tmp_path / "b")])
        assert (tmp_path / "a" / "field.csv").read_bytes() == (tmp_path / "b" / "field.csv").read_bytes()


class TestCompare:
    def test_summary_carries_distance_and_ratio(self, tmp_path):
        cfg = write_config(
            tmp_path / "c.ini",
            SMALL_GRID + "\n[problem]\nname = linear-generator\nhorizon = 0.08\n",
        )
        out = tmp_path / "out"
        rc = main(["compare", "--config", cfg, "--out", str(out), "--levels", "2"])
        assert rc == 0
        summary = json.loads((out / "summary.json").read_text())
        assert "distances" in summary["results"] and len(summary["results"]["distances"]) == 2
        assert (out / "rates.csv").exists() and (out / "field_hjb.csv").exists()


class TestSummarySchema:
    TOP_KEYS = {"artifacts", "checks", "command", "inputs", "passed", "results", "runtime_seconds"}

    def test_same_top_level_keys_across_commands(self, tmp_path):
        runs = [
            ("expectation", BASE + "\n[payoff]\nphi = square\n"),
            ("gheat", BASE + "\n[payoff]\nphi = call\n"),
            ("simulate", SMALL_GRID + "\n[problem]\nname = pure-gbm\nhorizon = 0.08\n[simulate]\nn_paths = 5\n"),
            ("bsde", SMALL_GRID + "\n[problem]\nname = linear-generator\nhorizon = 0.08\n"),
            ("value", SMALL_GRID + "\n[problem]\nname = pure-gbm\nhorizon = 0.08\n"),
        ]
        for i, (cmd, body) in enumerate(runs):
            cfg = write_config(tmp_path / f"c{i}.ini", body)
            out = tmp_path / f"out{i}"
            rc = main([cmd, "--config", cfg, "--out", str(out)])
            assert rc in (0, 1)
            summary = json.loads((out / "summary.json").read_text())
            assert set(summary.keys()) == self.TOP_KEYS


class TestSmokeMatrix:
    @pytest.mark.parametrize("problem", CATALOG_NAMES)
    @pytest.mark.parametrize(
        "command",
        ["simulate", "bsde", "value", "hjb", "compare", "dpp-check", "regularity", "rate-study"],
    )
    def test_catalog_times_commands(self, tmp_path, problem, command):
        body = SMALL_GRID + (
            f"\n[problem]\nname = {problem}\nhorizon = 0.08\n"
            "\n[simulate]\nn_paths = 5\n"
            "\n[dpp-check]\ndeltas = 1,5\n"
            "\n[rate-study]\nstudy = lemma45\nt0 = 0.01\nx0 = 0.1\n"
            "deltas = 0.02,0.01,0.005\ncontrol = 0.0\n"
        )
        cfg = write_config(tmp_path / "c.ini", body)
        rc = main([command, "--config", cfg, "--out", str(tmp_path / "out")])
        assert rc in (0, 1)


class TestRateStudies:
    def test_gheat_refinement_ratio(self, tmp_path):
        body = """
[uncertainty]
sigma_min_sq = 0.5
sigma_max_sq = 1.0

[grid]
t_steps = 125
dt = 0.008
x_min = -6.0
x_max = 6.0
x_steps = 120
vol_levels = 5

[rate-study]
study = gheat
"""
        cfg = write_config(tmp_path / "c.ini", body)
        out = tmp_path / "out"
        rc = main(["rate-study", "--config", cfg, "--out", str(out), "--levels", "3"])
        assert rc == 0
        summary = json.loads((out / "summary.json").read_text())
        assert summary["checks"][0]["passed"]

    def test_degenerate_heat_slope_is_second_order(self, tmp_path):
        body = """
[uncertainty]
sigma_min_sq = 1.0
sigma_max_sq = 1.0

[grid]
t_steps = 125
dt = 0.008
x_min = -6.0
x_max = 6.0
x_steps = 120
vol_levels = 1

[rate-study]
study = degenerate-heat
"""
        cfg = write_config(tmp_path / "c.ini", body)
        out = tmp_path / "out"
        rc = main(["rate-study", "--config", cfg, "--out", str(out), "--levels", "3"])
        assert rc == 0
        summary = json.loads((out / "summary.json").read_text())
        assert 1.5 <= summary["results"]["slope"] <= 2.5
