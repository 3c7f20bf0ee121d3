"""Adversarial-volatility lattice and seeded path simulation.

The lattice is a recombining trinomial chain on a shared space grid with
one transition kernel per variance level; conditional sublinear
expectations are backward sup-recursions over those kernels, and explicit
variance scenarios drive seeded Euler simulation of the controlled forward
dynamics.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from functools import cached_property
from typing import Callable, Sequence

import numpy as np

from .model import CflError, ControlProblem, GridSpec, UncertaintySet, scalar_problem

__all__ = [
    "VolatilityLattice",
    "VolatilityScenario",
    "PathBundle",
    "FeedbackControl",
    "constant_control",
    "conditional_g_expectation",
    "tower_check",
    "simulate_gsde",
    "worst_case_over_scenarios",
]


@dataclass(frozen=True)
class FeedbackControl:
    """Markov control: a function of the step index and current state."""

    fn: Callable
    label: str = "feedback"

    def __call__(self, k, x):
        return self.fn(k, x)


def constant_control(v: float, label: str | None = None) -> FeedbackControl:
    value = float(v)
    return FeedbackControl(lambda k, x: value, label or f"constant({value:g})")


@dataclass(frozen=True)
class VolatilityLattice:
    """Trinomial chain with one kernel per variance level.

    Per level the moves are {+dx, -dx, 0} with probabilities
    ``p_half = gamma*dt/(2*dx^2)`` (up and down) and ``1 - 2*p_half``; the
    stability bound keeps them in [0, 1].  Increments then have mean zero
    and variance ``gamma*dt`` exactly, so each kernel is locally consistent
    with one volatility scenario.
    """

    grid: GridSpec
    uncertainty: UncertaintySet

    def __post_init__(self):
        if self.uncertainty.dimension != 1:
            raise ValueError("lattice supports Brownian dimension 1 only")
        self.grid.require_cfl(self.uncertainty)

    @cached_property
    def x(self) -> np.ndarray:
        return self.grid.x_nodes()

    @cached_property
    def levels(self) -> np.ndarray:
        return self.uncertainty.levels(self.grid.vol_levels)

    @cached_property
    def p_half(self) -> np.ndarray:
        return self.levels * self.grid.dt / (2.0 * self.grid.dx**2)

    @cached_property
    def p_mid(self) -> np.ndarray:
        return 1.0 - 2.0 * self.p_half

    @property
    def n_nodes(self) -> int:
        return self.grid.x_steps + 1

    def root_index(self, x0: float = 0.0) -> int:
        idx = int(round((x0 - self.grid.x_min) / self.grid.dx))
        if not (0 <= idx < self.n_nodes) or abs(self.x[idx] - x0) > 1e-9:
            raise ValueError(f"{x0} is not a lattice node")
        return idx


def _interp_layer(values: np.ndarray, positions: np.ndarray, x_min: float, dx: float) -> np.ndarray:
    """Linear interpolation of a node-value layer at arbitrary positions.

    Positions within 1e-9 cells of a node are snapped to it, so grid-aligned
    dynamics reproduce node values exactly.  Positions beyond the domain use
    the outermost cell's slope, i.e. one-sided linear extrapolation (zero
    curvature), matching the finite-difference boundary treatment.
    """
    f = (positions - x_min) / dx
    fr = np.rint(f)
    f = np.where(np.abs(f - fr) < 1e-9, fr, f)
    i0 = np.clip(np.floor(f).astype(np.int64), 0, values.size - 2)
    w = f - i0
    return values[i0] * (1.0 - w) + values[i0 + 1] * w


def _nodes(value, like: np.ndarray) -> np.ndarray:
    return np.broadcast_to(np.asarray(value, dtype=float), like.shape)


def step_candidates(
    p: ControlProblem,
    lattice: VolatilityLattice,
    k: int,
    v_nodes,
    y_next: np.ndarray,
    picard_iterations: int = 0,
):
    """Per-level one-step backward values at step k given the next layer.

    The controlled successors are grid-aligned moves {+dx, 0, -dx} around
    the drifted position ``x + b*dt + h*gamma*dt``, taken with probability
    ``sigma^2 * p_half`` for the lateral branches so the one-step variance
    is ``sigma^2 * gamma * dt`` exactly.  (Scaling the displacement by
    sigma instead would add interpolation diffusion that does not vanish
    under refinement.)  Candidates carry the generator contributions
    ``f*dt + g*gamma*dt`` evaluated at the one-step conditional mean and the
    covariation estimate z.  Returns ``(cand, z)`` of shape (levels, nodes).
    """
    grid = lattice.grid
    x = lattice.x
    dt, dx = grid.dt, grid.dx
    t = k * dt
    b = _nodes(p.b(t, x, v_nodes), x)
    h = _nodes(p.h11(t, x, v_nodes), x)
    s = _nodes(p.sigma1(t, x, v_nodes), x)
    s_sq = s * s
    m = lattice.levels.size
    cand = np.empty((m, x.size))
    zs = np.empty((m, x.size))
    for j in range(m):
        gamma = lattice.levels[j]
        q = s_sq * lattice.p_half[j]
        q_max = float(np.max(q))
        if q_max > 0.5 + 1e-12:
            raise CflError(
                "controlled transition unstable: sigma^2*gamma*dt exceeds "
                f"dx^2 (branch probability {q_max:.3f} > 1/2)"
            )
        mid = x + b * dt + h * (gamma * dt)
        yu = _interp_layer(y_next, mid + dx, grid.x_min, dx)
        ym = _interp_layer(y_next, mid, grid.x_min, dx)
        yd = _interp_layer(y_next, mid - dx, grid.x_min, dx)
        e = q * (yu + yd) + (1.0 - 2.0 * q) * ym
        # Covariation with the driving increment: the lateral move +-dx is
        # sigma * dB, so E[Y dB] / (gamma dt) collapses to this difference.
        z = s * (yu - yd) / (2.0 * dx)
        y_arg = e
        val = e + _nodes(p.f(t, x, y_arg, z, v_nodes), x) * dt + _nodes(
            p.g11(t, x, y_arg, z, v_nodes), x
        ) * (gamma * dt)
        for _ in range(min(picard_iterations, 5)):
            new_val = e + _nodes(p.f(t, x, val, z, v_nodes), x) * dt + _nodes(
                p.g11(t, x, val, z, v_nodes), x
            ) * (gamma * dt)
            if float(np.max(np.abs(new_val - val))) < 1e-12:
                val = new_val
                break
            val = new_val
        cand[j] = val
        zs[j] = z
    return cand, zs


# Driving-noise chain: unit diffusion, no drift, no generators.
_PURE_NOISE = scalar_problem(sigma=lambda t, x, v: 1.0, name="driving-noise")


def conditional_g_expectation(
    lattice: VolatilityLattice,
    terminal: np.ndarray,
    from_step: int,
    terminal_step: int | None = None,
) -> np.ndarray:
    """Backward sup-recursion for the conditional sublinear expectation.

    ``terminal`` holds node values at ``terminal_step`` (the last grid step
    by default).  Returns all layers from ``from_step`` to ``terminal_step``
    as an array of shape (steps + 1, nodes); row 0 is the discrete
    conditional expectation at ``from_step``.
    """
    if terminal_step is None:
        terminal_step = lattice.grid.t_steps
    if not (0 <= from_step < terminal_step <= lattice.grid.t_steps):
        raise ValueError(f"need 0 <= from_step < terminal_step <= {lattice.grid.t_steps}")
    terminal = np.asarray(terminal, dtype=float)
    if terminal.shape != (lattice.n_nodes,):
        raise ValueError(
            f"terminal has {terminal.shape} values, lattice has {lattice.n_nodes} nodes"
        )
    layers = np.empty((terminal_step - from_step + 1, lattice.n_nodes))
    layers[-1] = terminal
    y = terminal
    for k in range(terminal_step - 1, from_step - 1, -1):
        cand, _ = step_candidates(_PURE_NOISE, lattice, k, 0.0, y)
        y = cand.max(axis=0)
        layers[k - from_step] = y
    return layers


def tower_check(lattice: VolatilityLattice, terminal: np.ndarray, s_step: int, t_step: int) -> float:
    """Max gap between nested and direct conditional expectations.

    The recursion composes literally, so the gap is zero up to rounding;
    this recomputes both sides honestly.
    """
    if not (s_step < t_step):
        raise ValueError("need s_step < t_step")
    inner = conditional_g_expectation(lattice, terminal, t_step)[0]
    nested = conditional_g_expectation(lattice, inner, s_step, terminal_step=t_step)[0]
    direct = conditional_g_expectation(lattice, terminal, s_step)[0]
    return float(np.max(np.abs(nested - direct)))


# ---------------------------------------------------------------------------
# Scenarios and path simulation
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class VolatilityScenario:
    """Piecewise-constant variance path, one level per time step."""

    uncertainty: UncertaintySet
    gamma: np.ndarray
    label: str = "scenario"

    def __post_init__(self):
        g = np.atleast_1d(np.asarray(self.gamma, dtype=float))
        if g.ndim != 1 or g.size < 1:
            raise ValueError("scenario needs a 1-d array of per-step levels")
        lo, hi = self.uncertainty.sigma_min_sq, self.uncertainty.sigma_max_sq
        if np.any(g < lo - 1e-12) or np.any(g > hi + 1e-12):
            raise ValueError(f"scenario levels must lie within [{lo}, {hi}]")
        g.setflags(write=False)
        object.__setattr__(self, "gamma", g)

    @property
    def n_steps(self) -> int:
        return self.gamma.size

    @staticmethod
    def constant(
        uncertainty: UncertaintySet, level: float, n_steps: int, label: str | None = None
    ) -> "VolatilityScenario":
        return VolatilityScenario(
            uncertainty,
            np.full(n_steps, float(level)),
            label or f"constant({level:g})",
        )


@dataclass(frozen=True)
class PathBundle:
    """Simulated trajectories of (X, B, <B>) under one scenario and control.

    ``qv_increments`` holds the per-step quadratic-variation increments
    ``gamma_k * dt`` exactly as used by the integrator; the cumulative
    ``quad_var`` is their running sum.
    """

    t: np.ndarray
    X: np.ndarray
    B: np.ndarray
    quad_var: np.ndarray
    qv_increments: np.ndarray
    scenario_label: str
    control_label: str
    seed: int

    @property
    def n_paths(self) -> int:
        return self.X.shape[0]

    @property
    def n_steps(self) -> int:
        return self.X.shape[1] - 1


def simulate_gsde(
    p: ControlProblem,
    scenario: VolatilityScenario,
    control: FeedbackControl | Callable,
    n_paths: int,
    seed: int,
    x0: float = 0.0,
) -> PathBundle:
    """Seeded Euler simulation of the controlled forward dynamics.

    One step is ``X += b*dt + h*gamma*dt + sigma*sqrt(gamma)*dW`` with dW
    standard normal scaled by sqrt(dt).  Path i draws its own stream from
    ``seed + i`` so results are reproducible regardless of evaluation
    order.
    """
    p.require_scalar()
    if n_paths < 1:
        raise ValueError("need n_paths >= 1")
    n_steps = scenario.n_steps
    dt = p.horizon / n_steps
    sq_dt = math.sqrt(dt)
    sq_gamma = np.sqrt(scenario.gamma)

    dW = np.empty((n_paths, n_steps))
    for i in range(n_paths):
        dW[i] = np.random.default_rng(seed + i).standard_normal(n_steps) * sq_dt

    X = np.empty((n_paths, n_steps + 1))
    B = np.empty((n_paths, n_steps + 1))
    X[:, 0] = x0
    B[:, 0] = 0.0
    for k in range(n_steps):
        t = k * dt
        xk = X[:, k]
        v = control(k, xk)
        gamma = scenario.gamma[k]
        noise = sq_gamma[k] * dW[:, k]
        X[:, k + 1] = (
            xk
            + _nodes(p.b(t, xk, v), xk) * dt
            + _nodes(p.h11(t, xk, v), xk) * (gamma * dt)
            + _nodes(p.sigma1(t, xk, v), xk) * noise
        )
        B[:, k + 1] = B[:, k] + noise
    if not np.all(np.isfinite(X)):
        raise ValueError("coefficient evaluation produced non-finite states")

    qv_inc = scenario.gamma * dt
    quad_var = np.concatenate([[0.0], np.cumsum(qv_inc)])
    quad_var = np.broadcast_to(quad_var, (n_paths, n_steps + 1))
    return PathBundle(
        t=np.arange(n_steps + 1) * dt,
        X=X,
        B=B,
        quad_var=quad_var,
        qv_increments=qv_inc,
        scenario_label=scenario.label,
        control_label=getattr(control, "label", "feedback"),
        seed=seed,
    )


def worst_case_over_scenarios(
    p: ControlProblem,
    payoff: Callable[[PathBundle], np.ndarray],
    scenarios: Sequence[VolatilityScenario],
    n_paths: int,
    seed: int,
    control: FeedbackControl | None = None,
    x0: float = 0.0,
) -> float:
    """Max over scenarios of the Monte Carlo mean of a path functional.

    The scenario family is finite, so this is a LOWER bound on the lattice
    sublinear expectation.  All scenarios share the seed (common random
    numbers).
    """
    if len(scenarios) == 0:
        raise ValueError("scenario list must be non-empty")
    if control is None:
        control = constant_control(p.control_set[0])
    best = -math.inf
    for sc in scenarios:
        bundle = simulate_gsde(p, sc, control, n_paths, seed, x0=x0)
        best = max(best, float(np.mean(np.asarray(payoff(bundle), dtype=float))))
    return best
