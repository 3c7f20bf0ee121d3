"""Cost functional, backward semigroup and the dynamic-programming value.

The value field is produced by per-step maximisation over the finite
control set of the one-step backward semigroup; on the lattice, feedback
controls attain the supremum among adapted controls, so the recursion is
an exact finite maximisation with deterministic tie-breaking (smallest
control index, then smallest volatility-level index).
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from .bsde import solve_gbsde
from .lattice import FeedbackControl, VolatilityLattice, step_candidates
from .model import ControlProblem, GridSpec

__all__ = [
    "ValueField",
    "ModuliRecord",
    "cost_functional",
    "backward_semigroup_step",
    "value_function",
    "argmax_policy",
    "dpp_consistency_check",
    "regularity_report",
    "interior_slice",
]

INTERIOR_MARGIN = 3  # cells excluded at each boundary for maxima


@dataclass(frozen=True)
class ValueField:
    """Value function on the grid with the per-node maximising control.

    ``values[k][i]`` approximates u(k*dt, x_i); the terminal row equals the
    sampled payoff exactly.  ``argmax_control[k][i]`` indexes the problem's
    control set for steps 0 .. t_steps-1.  ``provenance`` records which
    solver produced the field ("dpp" or "hjb").
    """

    grid: GridSpec
    values: np.ndarray
    argmax_control: np.ndarray
    provenance: str

    def __post_init__(self):
        if not np.all(np.isfinite(self.values)):
            raise ValueError("value field contains non-finite entries")

    def root_value(self, x0: float = 0.0) -> float:
        xs = self.grid.x_nodes()
        return float(np.interp(x0, xs, self.values[0]))


def interior_slice(n_nodes: int, margin: int = INTERIOR_MARGIN) -> slice:
    if n_nodes <= 2 * margin:
        raise ValueError("grid too small for an interior region")
    return slice(margin, n_nodes - margin)


def cost_functional(
    p: ControlProblem,
    control: FeedbackControl | Callable,
    lattice: VolatilityLattice,
    t_step: int,
    x_index: int,
) -> float:
    """Backward value at one node under a fixed feedback control.

    Solves the controlled BSDE with terminal data phi sampled on the final
    layer and reads the value at (t_step, x_index).
    """
    if not (0 <= x_index < lattice.n_nodes):
        raise ValueError(f"x_index {x_index} is off the grid")
    terminal = np.asarray(p.phi(lattice.x), dtype=float)
    terminal = np.broadcast_to(terminal, lattice.x.shape)
    sol = solve_gbsde(p, control, lattice, terminal, from_step=t_step)
    return float(sol.y[0, x_index])


def backward_semigroup_step(
    p: ControlProblem,
    v: float,
    lattice: VolatilityLattice,
    eta: np.ndarray,
    from_step: int,
    delta_steps: int,
) -> np.ndarray:
    """Backward semigroup under a constant control: data at step
    ``from_step + delta_steps`` mapped to values at ``from_step``."""
    eta = np.asarray(eta, dtype=float)
    if eta.shape != (lattice.n_nodes,):
        raise ValueError("eta length does not match the lattice")
    if delta_steps < 0 or from_step + delta_steps > lattice.grid.t_steps:
        raise ValueError("delta_steps out of range")
    if delta_steps == 0:
        return eta.copy()
    y = eta
    for k in range(from_step + delta_steps - 1, from_step - 1, -1):
        cand, _ = step_candidates(p, lattice, k, float(v), y)
        y = cand.max(axis=0)
    return y


def value_function(p: ControlProblem, lattice: VolatilityLattice) -> ValueField:
    """Per-step maximisation over the control set of the one-step semigroup.

    The recursion uses no randomness, so repeated runs produce bit-identical
    fields.
    """
    p.require_scalar()
    grid = lattice.grid
    n_t = grid.t_steps
    controls = np.asarray(p.control_set, dtype=float)
    values = np.empty((n_t + 1, lattice.n_nodes))
    argmax = np.empty((n_t, lattice.n_nodes), dtype=np.int64)
    terminal = np.broadcast_to(np.asarray(p.phi(lattice.x), dtype=float), lattice.x.shape)
    if not np.all(np.isfinite(terminal)):
        raise ValueError("terminal payoff produced non-finite samples")
    values[n_t] = terminal
    y = values[n_t]
    node_idx = np.arange(lattice.n_nodes)
    for k in range(n_t - 1, -1, -1):
        per_control = np.empty((controls.size, lattice.n_nodes))
        for ci, v in enumerate(controls):
            cand, _ = step_candidates(p, lattice, k, float(v), y)
            per_control[ci] = cand.max(axis=0)
        best = np.argmax(per_control, axis=0)
        y = per_control[best, node_idx]
        values[k] = y
        argmax[k] = best
    return ValueField(grid=grid, values=values, argmax_control=argmax, provenance="dpp")


def argmax_policy(field: ValueField, p: ControlProblem) -> FeedbackControl:
    """Feedback control reading the recorded maximiser of a value field."""
    controls = np.asarray(p.control_set, dtype=float)
    grid = field.grid

    def fn(k, x):
        idx = np.rint((np.asarray(x, dtype=float) - grid.x_min) / grid.dx).astype(np.int64)
        idx = np.clip(idx, 0, grid.x_steps)
        return controls[field.argmax_control[k, idx]]

    return FeedbackControl(fn, label="argmax-policy")


def dpp_consistency_check(
    p: ControlProblem,
    lattice: VolatilityLattice,
    field: ValueField,
    delta_list: Sequence[int],
    probe_layers: Sequence[int] | None = None,
) -> dict:
    """Residual of the multi-step programming identity per step count.

    For each delta the residual is the maximum interior deviation between
    the field and the sup over constant controls of the delta-step backward
    semigroup applied to the field delta steps later.  Constant-per-interval
    controls only approximate the sup when coefficients are
    control-sensitive, so for delta > 1 this reports rather than certifies.
    By default at most 16 evenly spaced layers are probed.
    """
    n_t = field.grid.t_steps
    if max(delta_list) > n_t:
        raise ValueError("delta exceeds the horizon")
    inner = interior_slice(lattice.n_nodes)
    residuals = {}
    for delta in delta_list:
        if probe_layers is None:
            n_probe = min(16, n_t - delta + 1)
            layers = np.unique(np.linspace(0, n_t - delta, n_probe).astype(int))
        else:
            layers = [k for k in probe_layers if k + delta <= n_t]
        worst = 0.0
        for k in layers:
            eta = field.values[k + delta]
            best = None
            for v in p.control_set:
                out = backward_semigroup_step(p, v, lattice, eta, k, delta)
                best = out if best is None else np.maximum(best, out)
            gap = float(np.max(np.abs(best[inner] - field.values[k][inner])))
            worst = max(worst, gap)
        residuals[int(delta)] = worst
    return residuals


@dataclass(frozen=True)
class ModuliRecord:
    """Empirical regularity moduli of a value field (interior nodes)."""

    lipschitz_x: float
    holder_t: float
    growth_ratio: float

    def as_dict(self) -> dict:
        return {
            "lipschitz_x": self.lipschitz_x,
            "holder_t": self.holder_t,
            "growth_ratio": self.growth_ratio,
        }


def regularity_report(field: ValueField, margin: int = INTERIOR_MARGIN) -> ModuliRecord:
    """Empirical Lipschitz-in-x, 1/2-Hoelder-in-t and linear-growth moduli."""
    u = field.values
    inner = interior_slice(u.shape[1], margin)
    xs = field.grid.x_nodes()[inner]
    dx = field.grid.dx
    dt = field.grid.dt
    lip = float(np.max(np.abs(np.diff(u[:, inner], axis=1)))) / dx
    hold = float(np.max(np.abs(np.diff(u[:, inner], axis=0)))) / math.sqrt(dt)
    growth = float(np.max(np.abs(u[:, inner]) / (1.0 + np.abs(xs))))
    return ModuliRecord(lipschitz_x=lip, holder_t=hold, growth_ratio=growth)
