"""Fully nonlinear operator assembly and the monotone backward FD scheme.

The terminal-value PDE is  du/dt + F(u_xx, u_x, u, x, t) = 0  with

    F = sup over controls of { G(H) + b * u_x + f(t, x, u, sigma*u_x, v) },
    H = sigma^2 * u_xx + 2 * h * u_x + 2 * g(t, x, u, sigma*u_x, v),

where G is the sublinear generator of the uncertainty interval.  The
scheme marches backward with central second differences, first differences
upwinded per control/level candidate by the sign of the effective drift
b + gamma*h, and zero-curvature boundary extrapolation; under the stated
stability bound every stencil weight is monotone.

The module also carries the smooth test functions and local probes used to
check the dynamic-programming field against the PDE in the viscosity
sense, including the one-step generator splitting (F1, F2, F0) and the
scalar comparison recursion behind it.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace
from typing import Callable, Sequence

import numpy as np

from .bsde import solve_gbsde
from .dpp import ValueField, interior_slice, value_function
from .lattice import VolatilityLattice, constant_control
from .model import CflError, ControlProblem, GFunction, GridSpec, eval_G, scalar_problem

__all__ = [
    "SmoothTestFunction",
    "polynomial_test_function",
    "windowed_test_function",
    "quadratic_test_function",
    "assemble_H",
    "eval_F",
    "OperatorProbe",
    "operator_probe",
    "solve_hjb",
    "hjb_cfl_number",
    "eval_F0",
    "local_ode_probe",
    "ResidualReport",
    "viscosity_residual",
    "dpp_hjb_distance",
    "time_shifted_problem",
    "ito_offset_problem",
    "frozen_offset_problem",
    "offset_gap",
]


# ---------------------------------------------------------------------------
# Smooth test functions (the touching class for the viscosity checks)
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class SmoothTestFunction:
    """Twice differentiable function of (t, x) with exact derivatives."""

    value: Callable
    d_t: Callable
    d_x: Callable
    d_xx: Callable
    label: str = "phi"


def polynomial_test_function(coeffs: dict, label: str = "poly") -> SmoothTestFunction:
    """Polynomial sum of c * t^i * x^j given as {(i, j): c}."""
    items = tuple((int(i), int(j), float(c)) for (i, j), c in coeffs.items())

    def value(t, x):
        return sum(c * t**i * x**j for i, j, c in items)

    def d_t(t, x):
        return sum(c * i * t ** (i - 1) * x**j for i, j, c in items if i >= 1)

    def d_x(t, x):
        return sum(c * j * t**i * x ** (j - 1) for i, j, c in items if j >= 1)

    def d_xx(t, x):
        return sum(c * j * (j - 1) * t**i * x ** (j - 2) for i, j, c in items if j >= 2)

    return SmoothTestFunction(value, d_t, d_x, d_xx, label=label)


def quadratic_test_function(
    t0: float, x0: float, value: float, slope_t: float, slope_x: float, curvature: float
) -> SmoothTestFunction:
    """Quadratic touching function centred at (t0, x0)."""

    def val(t, x):
        return value + slope_t * (t - t0) + slope_x * (x - x0) + 0.5 * curvature * (x - x0) ** 2

    return SmoothTestFunction(
        value=val,
        d_t=lambda t, x: slope_t,
        d_x=lambda t, x: slope_x + curvature * (x - x0),
        d_xx=lambda t, x: curvature,
        label="quadratic",
    )


def windowed_test_function(
    coeffs: dict, center: float, radius: float, label: str = "windowed-poly"
) -> SmoothTestFunction:
    """Polynomial times a compact C^2 window ((1 - u^2)^3 inside |u| < 1)."""
    poly = polynomial_test_function(coeffs)
    r = float(radius)

    def parts(x):
        u = (x - center) / r
        inside = np.abs(u) < 1.0
        q = np.where(inside, 1.0 - u * u, 0.0)
        w = q**3
        wx = np.where(inside, -6.0 * u * q**2 / r, 0.0)
        wxx = np.where(inside, (-6.0 * q**2 + 24.0 * u * u * q) / r**2, 0.0)
        return w, wx, wxx

    def value(t, x):
        w, _, _ = parts(x)
        return poly.value(t, x) * w

    def d_t(t, x):
        w, _, _ = parts(x)
        return poly.d_t(t, x) * w

    def d_x(t, x):
        w, wx, _ = parts(x)
        return poly.d_x(t, x) * w + poly.value(t, x) * wx

    def d_xx(t, x):
        w, wx, wxx = parts(x)
        return poly.d_xx(t, x) * w + 2.0 * poly.d_x(t, x) * wx + poly.value(t, x) * wxx

    return SmoothTestFunction(value, d_t, d_x, d_xx, label=label)


# ---------------------------------------------------------------------------
# Pointwise operator assembly
# ---------------------------------------------------------------------------


def _z_vector(p: ControlProblem, t: float, x: float, du: float, v: float):
    """Generator z-argument: the covariation coefficients (sigma_j * u_x)."""
    d = p.brownian_dim
    if d == 1:
        return float(p.sigma[0](t, x, v)) * du
    return np.array([float(s(t, x, v)) * du for s in p.sigma])


def assemble_H(p: ControlProblem, v: float, t: float, x: float, u: float, du: float, d2u: float):
    """Symmetric matrix inside the sublinear generator of the PDE operator."""
    for val in (t, x, u, du, d2u):
        if not math.isfinite(float(val)):
            raise ValueError("probe inputs must be finite")
    d = p.brownian_dim
    z = _z_vector(p, t, x, du, v)
    H = np.empty((d, d))
    for i in range(d):
        for j in range(d):
            s_i = float(p.sigma[i](t, x, v))
            s_j = float(p.sigma[j](t, x, v))
            H[i, j] = (
                d2u * s_i * s_j
                + 2.0 * du * float(p.h[i][j](t, x, v))
                + 2.0 * float(p.g[i][j](t, x, u, z, v))
            )
    return H


def eval_F(
    p: ControlProblem, g_fun: GFunction, t: float, x: float, u: float, du: float, d2u: float
):
    """Pointwise PDE operator value and the index of the maximising control."""
    best = -math.inf
    best_idx = 0
    for idx, v in enumerate(p.control_set):
        H = assemble_H(p, v, t, x, u, du, d2u)
        z = _z_vector(p, t, x, du, v)
        val = eval_G(g_fun, H) + float(p.b(t, x, v)) * du + float(p.f(t, x, u, z, v))
        if val > best:
            best = val
            best_idx = idx
    return best, best_idx


@dataclass(frozen=True)
class OperatorProbe:
    """Snapshot of the operator assembly at one point and test function."""

    t: float
    x: float
    phi_value: float
    phi_t: float
    phi_x: float
    phi_xx: float
    per_control: tuple  # (v, H matrix, F1, F2 matrix) per control point
    F: float
    argmax_control: int
    F0: float

    @property
    def consistency_gap(self) -> float:
        """|F0(t,x,0,0) - (phi_t + F)|, the factor-2 bookkeeping guard."""
        return abs(self.F0 - (self.phi_t + self.F))

    def as_dict(self) -> dict:
        return {
            "t": self.t,
            "x": self.x,
            "phi": self.phi_value,
            "phi_t": self.phi_t,
            "phi_x": self.phi_x,
            "phi_xx": self.phi_xx,
            "F": self.F,
            "argmax_control": self.argmax_control,
            "F0": self.F0,
            "consistency_gap": self.consistency_gap,
        }


def _f1_f2(
    p: ControlProblem,
    phi: SmoothTestFunction,
    r: float,
    x: float,
    y: float,
    z,
    v: float,
):
    """Generator splitting of the offset value along a smooth function.

    F1 collects the dt terms (drift transport, time derivative, f shifted
    by the function and its gradient); F2 collects the quadratic-variation
    terms per (i, j) with the HALF curvature factor, so that twice its
    sublinear image matches the PDE operator's H.
    """
    d = p.brownian_dim
    pv = float(phi.value(r, x))
    px = float(phi.d_x(r, x))
    pt = float(phi.d_t(r, x))
    pxx = float(phi.d_xx(r, x))
    if d == 1:
        z_shift = z + float(p.sigma[0](r, x, v)) * px
    else:
        z_shift = np.asarray(z, dtype=float) + np.array(
            [float(s(r, x, v)) * px for s in p.sigma]
        )
    f1 = float(p.b(r, x, v)) * px + pt + float(p.f(r, x, y + pv, z_shift, v))
    f2 = np.empty((d, d))
    for i in range(d):
        for j in range(d):
            s_i = float(p.sigma[i](r, x, v))
            s_j = float(p.sigma[j](r, x, v))
            f2[i, j] = (
                px * float(p.h[i][j](r, x, v))
                + 0.5 * pxx * s_i * s_j
                + float(p.g[i][j](r, x, y + pv, z_shift, v))
            )
    return f1, f2


def eval_F0(
    p: ControlProblem,
    g_fun: GFunction,
    phi: SmoothTestFunction,
    t: float,
    x: float,
    y: float,
    z,
) -> float:
    """Frozen-coefficient operator: max over controls of F1 + 2 G(F2)."""
    best = -math.inf
    for v in p.control_set:
        f1, f2 = _f1_f2(p, phi, t, x, y, z, v)
        val = f1 + 2.0 * eval_G(g_fun, f2)
        if val > best:
            best = val
    return best


def operator_probe(
    p: ControlProblem, g_fun: GFunction, phi: SmoothTestFunction, t: float, x: float
) -> OperatorProbe:
    """Assemble H, F, the (F1, F2) splitting and F0 at one probe point."""
    pv = float(phi.value(t, x))
    px = float(phi.d_x(t, x))
    pt = float(phi.d_t(t, x))
    pxx = float(phi.d_xx(t, x))
    records = []
    for v in p.control_set:
        H = assemble_H(p, v, t, x, pv, px, pxx)
        f1, f2 = _f1_f2(p, phi, t, x, 0.0, 0.0 if p.brownian_dim == 1 else np.zeros(p.brownian_dim), v)
        records.append((float(v), H, f1, f2))
    F, arg = eval_F(p, g_fun, t, x, pv, px, pxx)
    F0 = eval_F0(p, g_fun, phi, t, x, 0.0, 0.0 if p.brownian_dim == 1 else np.zeros(p.brownian_dim))
    return OperatorProbe(
        t=t,
        x=x,
        phi_value=pv,
        phi_t=pt,
        phi_x=px,
        phi_xx=pxx,
        per_control=tuple(records),
        F=F,
        argmax_control=arg,
        F0=F0,
    )


# ---------------------------------------------------------------------------
# Monotone finite-difference scheme
# ---------------------------------------------------------------------------


def hjb_cfl_number(p: ControlProblem, g_fun: GFunction, grid: GridSpec) -> float:
    """Stability number of the explicit scheme (must be <= 1).

    Coefficient maxima are sampled on the grid times the control set at a
    few times; the declared Lipschitz bound covers the zero-order terms.
    """
    xs = grid.x_nodes()
    u = g_fun.uncertainty
    max_s2 = 0.0
    max_drift = 0.0
    for t in (0.0, 0.5 * grid.horizon, grid.horizon):
        for v in p.control_set:
            s = np.abs(np.broadcast_to(np.asarray(p.sigma1(t, xs, v), dtype=float), xs.shape))
            b = np.broadcast_to(np.asarray(p.b(t, xs, v), dtype=float), xs.shape)
            h = np.broadcast_to(np.asarray(p.h11(t, xs, v), dtype=float), xs.shape)
            max_s2 = max(max_s2, float(np.max(s**2)))
            for gamma in (u.sigma_min_sq, u.sigma_max_sq):
                max_drift = max(max_drift, float(np.max(np.abs(b + gamma * h))))
    return grid.dt * (
        u.sigma_max_sq * max_s2 / grid.dx**2 + max_drift / grid.dx + p.lipschitz_bound
    )


def _hjb_operator(
    p: ControlProblem,
    levels: np.ndarray,
    grid: GridSpec,
    u: np.ndarray,
    t: float,
):
    """Discrete operator on one layer: (F values, argmax control indices).

    Ghost values extend the layer with zero curvature, so the second
    difference vanishes on the boundary rows and one-sided drift stencils
    fall back to the interior slope there.
    """
    xs = grid.x_nodes()
    dx = grid.dx
    ghost_lo = 2.0 * u[0] - u[1]
    ghost_hi = 2.0 * u[-1] - u[-2]
    up = np.concatenate([u[1:], [ghost_hi]])
    dn = np.concatenate([[ghost_lo], u[:-1]])
    d2 = (up - 2.0 * u + dn) / dx**2
    d_fwd = (up - u) / dx
    d_bwd = (u - dn) / dx
    d_cen = (up - dn) / (2.0 * dx)

    best = None
    best_idx = None
    for ci, v in enumerate(p.control_set):
        s = np.broadcast_to(np.asarray(p.sigma1(t, xs, v), dtype=float), xs.shape)
        b = np.broadcast_to(np.asarray(p.b(t, xs, v), dtype=float), xs.shape)
        h = np.broadcast_to(np.asarray(p.h11(t, xs, v), dtype=float), xs.shape)
        z = s * d_cen
        f_val = np.broadcast_to(np.asarray(p.f(t, xs, u, z, v), dtype=float), xs.shape)
        g_val = np.broadcast_to(np.asarray(p.g11(t, xs, u, z, v), dtype=float), xs.shape)
        over_levels = None
        for gamma in levels:
            drift = b + gamma * h
            d_up = np.where(drift >= 0.0, d_fwd, d_bwd)
            cand = 0.5 * gamma * s**2 * d2 + drift * d_up + gamma * g_val
            over_levels = cand if over_levels is None else np.maximum(over_levels, cand)
        f_v = over_levels + f_val
        if best is None:
            best = f_v
            best_idx = np.zeros(xs.size, dtype=np.int64)
        else:
            improve = f_v > best
            best = np.where(improve, f_v, best)
            best_idx = np.where(improve, ci, best_idx)
    return best, best_idx


def solve_hjb(p: ControlProblem, g_fun: GFunction, grid: GridSpec) -> ValueField:
    """Backward explicit marching of the fully nonlinear operator."""
    p.require_scalar()
    cfl = hjb_cfl_number(p, g_fun, grid)
    if cfl > 1.0 + 1e-12:
        raise CflError(f"explicit scheme unstable: stability number {cfl:.3f} > 1")
    levels = g_fun.uncertainty.levels(grid.vol_levels)
    xs = grid.x_nodes()
    n_t = grid.t_steps
    values = np.empty((n_t + 1, xs.size))
    argmax = np.empty((n_t, xs.size), dtype=np.int64)
    u = np.broadcast_to(np.asarray(p.phi(xs), dtype=float), xs.shape).copy()
    if not np.all(np.isfinite(u)):
        raise ValueError("terminal payoff produced non-finite samples")
    values[n_t] = u
    for k in range(n_t - 1, -1, -1):
        F, idx = _hjb_operator(p, levels, grid, u, k * grid.dt)
        if not np.all(np.isfinite(F)):
            raise ValueError(f"operator evaluation produced non-finite values at step {k}")
        u = u + grid.dt * F
        values[k] = u
        argmax[k] = idx
    return ValueField(grid=grid, values=values, argmax_control=argmax, provenance="hjb")


@dataclass(frozen=True)
class ResidualReport:
    max_abs: float
    mean_abs: float
    per_layer: np.ndarray  # max interior residual per time step


def viscosity_residual(field: ValueField, p: ControlProblem, g_fun: GFunction) -> ResidualReport:
    """Discrete PDE residual of a value field with the scheme's stencils.

    Evaluates (u[k+1] - u[k]) / dt + F(u[k+1]) on interior nodes; a field
    produced by the FD solver itself is residual-free by construction, so
    nonzero values measure cross-solver disagreement.
    """
    grid = field.grid
    levels = g_fun.uncertainty.levels(grid.vol_levels)
    inner = interior_slice(grid.x_steps + 1)
    total = 0.0
    count = 0
    per_layer = np.empty(grid.t_steps)
    for k in range(grid.t_steps):
        F, _ = _hjb_operator(p, levels, grid, field.values[k + 1], k * grid.dt)
        res = (field.values[k + 1] - field.values[k]) / grid.dt + F
        r = np.abs(res[inner])
        per_layer[k] = float(np.max(r))
        total += float(np.sum(r))
        count += r.size
    return ResidualReport(max_abs=float(np.max(per_layer)), mean_abs=total / count, per_layer=per_layer)


def dpp_hjb_distance(p: ControlProblem, g_fun: GFunction, grid: GridSpec):
    """Interior sup distance between the DPP and FD value fields."""
    lattice = VolatilityLattice(grid, g_fun.uncertainty)
    field_dpp = value_function(p, lattice)
    field_hjb = solve_hjb(p, g_fun, grid)
    inner = interior_slice(grid.x_steps + 1)
    dist = float(np.max(np.abs(field_dpp.values[:, inner] - field_hjb.values[:, inner])))
    return dist, field_dpp, field_hjb


# ---------------------------------------------------------------------------
# Local comparison machinery (offset BSDEs and the scalar recursion)
# ---------------------------------------------------------------------------


def time_shifted_problem(p: ControlProblem, t0: float, horizon: float) -> ControlProblem:
    """Same problem with coefficients read at t0 + t (local sub-interval)."""
    return scalar_problem(
        b=lambda t, x, v: p.b(t0 + t, x, v),
        h=lambda t, x, v: p.h11(t0 + t, x, v),
        sigma=lambda t, x, v: p.sigma1(t0 + t, x, v),
        f=lambda t, x, y, z, v: p.f(t0 + t, x, y, z, v),
        g=lambda t, x, y, z, v: p.g11(t0 + t, x, y, z, v),
        phi=p.phi,
        control_set=p.control_set,
        horizon=horizon,
        lipschitz_bound=p.lipschitz_bound,
        name=p.name + "-shifted",
    )


def ito_offset_problem(p: ControlProblem, phi: SmoothTestFunction, t0: float, horizon: float) -> ControlProblem:
    """BSDE of the semigroup value minus phi along the controlled path.

    Same dynamics as p; the dt generator is F1 and the quadratic-variation
    generator F2, both evaluated at the node state.  With zero terminal
    data its solution equals the semigroup applied to phi minus phi at the
    start, up to discretisation.
    """
    p.require_scalar()

    def f1(t, x, y, z, v):
        r = t0 + t
        pv = phi.value(r, x)
        px = phi.d_x(r, x)
        z_shift = z + p.sigma1(r, x, v) * px
        return p.b(r, x, v) * px + phi.d_t(r, x) + p.f(r, x, y + pv, z_shift, v)

    def f2(t, x, y, z, v):
        r = t0 + t
        pv = phi.value(r, x)
        px = phi.d_x(r, x)
        s = p.sigma1(r, x, v)
        z_shift = z + s * px
        return px * p.h11(r, x, v) + 0.5 * phi.d_xx(r, x) * s * s + p.g11(
            r, x, y + pv, z_shift, v
        )

    return scalar_problem(
        b=lambda t, x, v: p.b(t0 + t, x, v),
        h=lambda t, x, v: p.h11(t0 + t, x, v),
        sigma=lambda t, x, v: p.sigma1(t0 + t, x, v),
        f=f1,
        g=f2,
        phi=lambda x: np.zeros_like(np.asarray(x, dtype=float)),
        control_set=p.control_set,
        horizon=horizon,
        lipschitz_bound=p.lipschitz_bound,
        name=p.name + "-offset",
    )


def frozen_offset_problem(
    p: ControlProblem, phi: SmoothTestFunction, t0: float, x0: float, horizon: float
) -> ControlProblem:
    """Offset BSDE with the generators' state argument frozen at x0."""
    base = ito_offset_problem(p, phi, t0, horizon)

    def freeze(fn):
        return lambda t, x, y, z, v: fn(t, x0, y, z, v)

    return replace(
        base,
        f=freeze(base.f),
        g=((freeze(base.g11),),),
        name=p.name + "-offset-frozen",
    )


def offset_gap(
    p: ControlProblem,
    g_fun: GFunction,
    phi: SmoothTestFunction,
    t0: float,
    x0: float,
    delta: float,
    v: float,
    steps: int = 64,
    vol_levels: int = 5,
) -> float:
    """|Y1 - Y2| at the probe point over a window of length delta.

    Y1 solves the offset BSDE along the moving state, Y2 the same BSDE with
    coefficients frozen at x0; both run on a local lattice sized to the
    diffusion cone, under the constant control v.
    """
    lattice = _local_lattice(p, g_fun, x0, delta, steps, vol_levels)
    zero = np.zeros(lattice.n_nodes)
    control = constant_control(v)
    y1 = solve_gbsde(ito_offset_problem(p, phi, t0, delta), control, lattice, zero)
    y2 = solve_gbsde(frozen_offset_problem(p, phi, t0, x0, delta), control, lattice, zero)
    root = lattice.root_index(x0)
    return abs(float(y1.y[0, root]) - float(y2.y[0, root]))


def _local_lattice(
    p: ControlProblem,
    g_fun: GFunction,
    x0: float,
    delta: float,
    steps: int,
    vol_levels: int,
) -> VolatilityLattice:
    """Lattice centred at x0 covering the diffusion cone of one window."""
    u = g_fun.uncertainty
    dt = delta / steps
    dx = 1.05 * math.sqrt(u.sigma_max_sq * dt)
    probe = np.array([x0 - 1.0, x0, x0 + 1.0])
    s_max = 0.0
    drift_max = 0.0
    for v in p.control_set:
        s = np.abs(np.asarray(p.sigma1(0.0, probe, v), dtype=float))
        b = np.abs(np.asarray(p.b(0.0, probe, v), dtype=float))
        h = np.abs(np.asarray(p.h11(0.0, probe, v), dtype=float))
        s_max = max(s_max, float(np.max(s)))
        drift_max = max(drift_max, float(np.max(b + u.sigma_max_sq * h)))
    span = 7.0 * max(s_max, 1e-6) * math.sqrt(u.sigma_max_sq * delta) + drift_max * delta
    half_cells = max(8, int(math.ceil(span / dx)))
    grid = GridSpec(
        t_steps=steps,
        dt=dt,
        x_min=x0 - half_cells * dx,
        x_max=x0 + half_cells * dx,
        x_steps=2 * half_cells,
        vol_levels=vol_levels,
    )
    return VolatilityLattice(grid, u)


def local_ode_probe(
    p: ControlProblem,
    g_fun: GFunction,
    phi: SmoothTestFunction,
    t: float,
    x: float,
    delta: float,
    substeps: int = 1000,
) -> float:
    """Backward scalar integration of dY = -F0(s, x, Y, 0) ds over delta.

    Fourth-order Runge-Kutta from zero terminal data; the sign of the
    result for small delta indicates the viscosity sub/super-solution
    inequality at the probe point.
    """
    if delta <= 0.0:
        raise ValueError("delta must be positive")
    h_step = delta / substeps
    y = 0.0

    def rhs(tau, yy):
        return eval_F0(p, g_fun, phi, t + delta - tau, x, yy, 0.0)

    tau = 0.0
    for _ in range(substeps):
        k1 = rhs(tau, y)
        k2 = rhs(tau + 0.5 * h_step, y + 0.5 * h_step * k1)
        k3 = rhs(tau + 0.5 * h_step, y + 0.5 * h_step * k2)
        k4 = rhs(tau + h_step, y + h_step * k3)
        y += h_step * (k1 + 2.0 * k2 + 2.0 * k3 + k4) / 6.0
        tau += h_step
    return y
