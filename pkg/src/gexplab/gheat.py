"""Explicit monotone solver for the nonlinear heat equation u_t = G(u_xx).

The solved field characterises the one-dimensional sublinear-normal
distribution: the value u(1, 0) started from payoff phi is the unconditional
sublinear expectation of phi at unit time.  PDE time runs FORWARD from the
initial payoff here; every other solver in the package marches backward
from terminal data.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .model import CflError, GFunction, GridSpec

__all__ = ["HeatField", "solve_g_heat", "g_normal_expectation"]


@dataclass(frozen=True)
class HeatField:
    """Space-time field from the forward nonlinear heat evolution.

    ``values[k][i]`` is the solution at time ``k * grid.dt`` and node
    ``x_i``; row 0 is the sampled payoff.
    """

    grid: GridSpec
    t_end: float
    values: np.ndarray
    payoff_label: str = "payoff"

    def value_at(self, t: float, x: float) -> float:
        """Read the field, exact in t (grid-aligned), linear in x."""
        k = int(round(t / self.grid.dt))
        if abs(k * self.grid.dt - t) > 1e-9 or not (0 <= k < self.values.shape[0]):
            raise ValueError(f"time {t} is not on the solved grid")
        row = self.values[k]
        xs = self.grid.x_nodes()
        if not (xs[0] <= x <= xs[-1]):
            raise ValueError(f"point {x} outside [{xs[0]}, {xs[-1]}]")
        return float(np.interp(x, xs, row))


def solve_g_heat(
    g_fun: GFunction,
    phi,
    t_end: float,
    grid: GridSpec,
    payoff_label: str = "payoff",
) -> HeatField:
    """March the explicit scheme u <- u + dt * G(second difference).

    Monotone under the stability bound sigma_max_sq * dt <= dx^2, which is
    checked up front.  Boundary rows use one-sided linear extrapolation,
    i.e. zero curvature, so they stay at the payoff value.
    """
    if g_fun.uncertainty.dimension != 1:
        raise ValueError("heat solver supports Brownian dimension 1 only")
    grid.require_cfl(g_fun.uncertainty)
    n_steps = int(round(t_end / grid.dt))
    if n_steps < 1 or abs(n_steps * grid.dt - t_end) > 1e-9:
        raise ValueError(f"t_end = {t_end} is not a multiple of dt = {grid.dt}")
    if n_steps > grid.t_steps:
        raise ValueError("t_end exceeds the grid horizon")

    xs = grid.x_nodes()
    u0 = np.asarray(phi(xs), dtype=float)
    u0 = np.broadcast_to(u0, xs.shape).copy()
    if not np.all(np.isfinite(u0)):
        raise ValueError("payoff produced non-finite samples")

    inv_dx2 = 1.0 / grid.dx**2
    values = np.empty((n_steps + 1, xs.size))
    values[0] = u0
    u = u0
    for k in range(n_steps):
        curv = np.zeros_like(u)
        curv[1:-1] = (u[2:] - 2.0 * u[1:-1] + u[:-2]) * inv_dx2
        u = u + grid.dt * g_fun.scalar(curv)
        values[k + 1] = u
    return HeatField(grid=grid, t_end=t_end, values=values, payoff_label=payoff_label)


def g_normal_expectation(g_fun: GFunction, phi, grid: GridSpec, payoff_label: str = "payoff") -> float:
    """Unconditional sublinear expectation of phi at unit time: u(1, 0)."""
    field = solve_g_heat(g_fun, phi, 1.0, grid, payoff_label=payoff_label)
    return field.value_at(1.0, 0.0)
