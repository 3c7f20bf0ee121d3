"""Domain types for the volatility-uncertainty control laboratory.

Everything downstream (heat solver, lattice, BSDE engine, value iteration,
HJB solver) is parameterised by three objects defined here:

* ``UncertaintySet``    the interval of admissible instantaneous variances,
* ``ControlProblem``    drift / quadratic-variation / diffusion coefficients,
  generators, terminal payoff and a finite control set,
* ``GridSpec``          the shared time/space/volatility discretisation.

All types are immutable after construction and all operations are pure
functions of their inputs, so they are safe to share across threads.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import Callable, Sequence

import numpy as np

__all__ = [
    "CflError",
    "CatalogError",
    "UncertaintySet",
    "GFunction",
    "eval_G",
    "ControlProblem",
    "scalar_problem",
    "GridSpec",
    "CheckResult",
    "ValidationReport",
    "validate_problem",
    "catalog_problem",
    "CATALOG_NAMES",
    "payoff_function",
    "PAYOFF_NAMES",
]

# Coefficients map (t, x, v) -> reals, generators map (t, x, y, z, v) -> reals.
# All of them must accept numpy arrays for x (and y, z, v) and broadcast.
Coefficient = Callable[..., "float | np.ndarray"]
Generator = Callable[..., "float | np.ndarray"]
Payoff = Callable[[np.ndarray], "float | np.ndarray"]


class CflError(ValueError):
    """A grid violates the stability condition of an explicit scheme."""


class CatalogError(ValueError):
    """Unknown catalog entry or invalid catalog parameters."""


# ---------------------------------------------------------------------------
# Uncertainty set and the sublinear generator G
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class UncertaintySet:
    """Interval of admissible instantaneous variances.

    The set of covariance scenarios is the isotropic matrix interval
    ``{gamma : sigma_min_sq * I <= gamma <= sigma_max_sq * I}``.  The interval
    form admits a closed-form sublinear generator and exact extremal
    scenarios; general convex scenario sets are out of scope.
    """

    sigma_min_sq: float
    sigma_max_sq: float
    dimension: int = 1

    def __post_init__(self):
        if not (0.0 < self.sigma_min_sq <= self.sigma_max_sq):
            raise ValueError(
                "need 0 < sigma_min_sq <= sigma_max_sq, got "
                f"({self.sigma_min_sq}, {self.sigma_max_sq})"
            )
        if not math.isfinite(self.sigma_max_sq):
            raise ValueError("variance bounds must be finite")
        if self.dimension < 1:
            raise ValueError("dimension must be a positive integer")

    @property
    def degenerate(self) -> bool:
        """True iff the interval collapses to a single variance."""
        return self.sigma_min_sq == self.sigma_max_sq

    def levels(self, m: int) -> np.ndarray:
        """Strictly increasing variance levels containing both endpoints."""
        if m < 1:
            raise ValueError("need at least one volatility level")
        if self.degenerate:
            return np.array([self.sigma_min_sq])
        if m == 1:
            raise ValueError("non-degenerate set needs at least two levels")
        return np.linspace(self.sigma_min_sq, self.sigma_max_sq, m)


@dataclass(frozen=True)
class GFunction:
    """Sublinear generator ``G(A) = sup over scenarios of Tr(gamma A) / 2``.

    For the isotropic interval set the supremum is exact:
    ``G(A) = (sigma_max_sq * tr A+  -  sigma_min_sq * tr A-) / 2``
    with ``A+`` / ``A-`` the positive/negative parts of ``A``.
    """

    uncertainty: UncertaintySet

    def __call__(self, a) -> float:
        return eval_G(self, a)

    def scalar(self, a):
        """Vectorised generator for 1-d second differences."""
        a = np.asarray(a, dtype=float)
        u = self.uncertainty
        return 0.5 * np.where(a >= 0.0, u.sigma_max_sq * a, u.sigma_min_sq * a)


def eval_G(g_fun: GFunction, a) -> float:
    """Evaluate the sublinear generator on a symmetric matrix.

    Accepts a scalar, a length-1 array or a ``d x d`` symmetric matrix.
    Raises ``ValueError`` on non-symmetric (tolerance 1e-12) or non-finite
    input.
    """
    u = g_fun.uncertainty
    arr = np.asarray(a, dtype=float)
    if not np.all(np.isfinite(arr)):
        raise ValueError("matrix has non-finite entries")
    if arr.ndim == 0:
        lam = arr.reshape(1)
    elif arr.ndim == 1 and arr.size == 1:
        lam = arr
    else:
        if arr.ndim != 2 or arr.shape[0] != arr.shape[1]:
            raise ValueError(f"expected a square matrix, got shape {arr.shape}")
        if np.max(np.abs(arr - arr.T)) > 1e-12:
            raise ValueError("matrix is not symmetric within 1e-12")
        lam = np.linalg.eigvalsh(arr)
    pos = float(np.sum(np.maximum(lam, 0.0)))
    neg = float(np.sum(np.maximum(-lam, 0.0)))
    return 0.5 * (u.sigma_max_sq * pos - u.sigma_min_sq * neg)


# ---------------------------------------------------------------------------
# Control problem
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class ControlProblem:
    """Coefficients, generators and payoff of one control problem.

    ``h`` and ``g`` are symmetric ``d x d`` nested tuples of callables, and
    ``sigma`` a length-``d`` tuple; the numerical engines require state and
    Brownian dimension 1 and read ``h[0][0]``, ``sigma[0]``, ``g[0][0]``.
    ``lipschitz_bound`` is the declared joint Lipschitz constant checked by
    ``validate_problem``.
    """

    b: Coefficient
    h: tuple
    sigma: tuple
    f: Generator
    g: tuple
    phi: Payoff
    control_set: tuple
    horizon: float
    lipschitz_bound: float
    name: str = "custom"
    state_dim: int = 1

    def __post_init__(self):
        if self.horizon <= 0.0:
            raise ValueError(f"horizon must be positive, got {self.horizon}")
        if len(self.control_set) == 0:
            raise ValueError("control set must be non-empty")
        if self.lipschitz_bound <= 0.0:
            raise ValueError("declared Lipschitz bound must be positive")
        d = len(self.sigma)
        if len(self.h) != d or any(len(row) != d for row in self.h):
            raise ValueError("h must be a d x d array of coefficients")
        if len(self.g) != d or any(len(row) != d for row in self.g):
            raise ValueError("g must be a d x d array of generators")

    @property
    def brownian_dim(self) -> int:
        return len(self.sigma)

    def require_scalar(self):
        if self.state_dim != 1 or self.brownian_dim != 1:
            raise ValueError(
                "numerical engines support state dimension 1 and Brownian "
                f"dimension 1, got n={self.state_dim}, d={self.brownian_dim}"
            )

    # Scalar accessors used by the d = 1 engines.
    @property
    def h11(self) -> Coefficient:
        return self.h[0][0]

    @property
    def sigma1(self) -> Coefficient:
        return self.sigma[0]

    @property
    def g11(self) -> Generator:
        return self.g[0][0]


def _zero_coeff(t, x, v):
    return 0.0


def _zero_gen(t, x, y, z, v):
    return 0.0


def scalar_problem(
    b: Coefficient = _zero_coeff,
    h: Coefficient = _zero_coeff,
    sigma: Coefficient = _zero_coeff,
    f: Generator = _zero_gen,
    g: Generator = _zero_gen,
    phi: Payoff = lambda x: np.zeros_like(np.asarray(x, dtype=float)),
    control_set: Sequence[float] = (0.0,),
    horizon: float = 1.0,
    lipschitz_bound: float = 1.0,
    name: str = "custom",
) -> ControlProblem:
    """Convenience constructor for d = 1 problems from scalar callables."""
    return ControlProblem(
        b=b,
        h=((h,),),
        sigma=(sigma,),
        f=f,
        g=((g,),),
        phi=phi,
        control_set=tuple(float(v) for v in control_set),
        horizon=float(horizon),
        lipschitz_bound=float(lipschitz_bound),
        name=name,
    )


# ---------------------------------------------------------------------------
# Grid specification
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class GridSpec:
    """Uniform time/space grid plus the volatility-level count.

    The explicit schemes and the lattice kernels require the parabolic
    stability bound ``sigma_max_sq * dt <= dx**2``; construction does not
    enforce it (the heat solver and lattice do, before any compute).
    """

    t_steps: int
    dt: float
    x_min: float
    x_max: float
    x_steps: int
    vol_levels: int = 5

    def __post_init__(self):
        if self.t_steps < 1 or self.x_steps < 1:
            raise ValueError("t_steps and x_steps must be positive")
        if self.dt <= 0.0:
            raise ValueError("dt must be positive")
        if not self.x_min < self.x_max:
            raise ValueError("need x_min < x_max")
        if self.vol_levels < 1:
            raise ValueError("vol_levels must be positive")

    @property
    def dx(self) -> float:
        return (self.x_max - self.x_min) / self.x_steps

    @property
    def horizon(self) -> float:
        return self.t_steps * self.dt

    def x_nodes(self) -> np.ndarray:
        return np.linspace(self.x_min, self.x_max, self.x_steps + 1)

    def t_nodes(self) -> np.ndarray:
        return np.arange(self.t_steps + 1) * self.dt

    def cfl_number(self, sigma_max_sq: float) -> float:
        return sigma_max_sq * self.dt / self.dx**2

    def require_cfl(self, uncertainty: UncertaintySet):
        c = self.cfl_number(uncertainty.sigma_max_sq)
        if c > 1.0 + 1e-12:
            raise CflError(
                f"sigma_max_sq*dt = {uncertainty.sigma_max_sq * self.dt:.3e} "
                f"exceeds dx^2 = {self.dx**2:.3e} (CFL number {c:.3f})"
            )

    def halved(self) -> "GridSpec":
        """Refinement step halving (dt, dx^2); x_steps stays even."""
        new_x = int(round(self.x_steps * math.sqrt(2.0) / 2.0)) * 2
        return replace(self, t_steps=self.t_steps * 2, dt=self.dt / 2.0, x_steps=new_x)

    @staticmethod
    def for_horizon(
        horizon: float,
        t_steps: int,
        x_min: float,
        x_max: float,
        x_steps: int,
        vol_levels: int = 5,
    ) -> "GridSpec":
        return GridSpec(
            t_steps=t_steps,
            dt=horizon / t_steps,
            x_min=x_min,
            x_max=x_max,
            x_steps=x_steps,
            vol_levels=vol_levels,
        )


# ---------------------------------------------------------------------------
# Hypothesis validation
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class CheckResult:
    name: str
    passed: bool
    worst: float
    detail: str = ""


@dataclass(frozen=True)
class ValidationReport:
    problem_name: str
    samples: int
    checks: tuple

    @property
    def passed(self) -> bool:
        return all(c.passed for c in self.checks)

    def check(self, name: str) -> CheckResult:
        for c in self.checks:
            if c.name == name:
                return c
        raise KeyError(name)

    def __str__(self) -> str:
        lines = [f"validation of '{self.problem_name}' ({self.samples} samples)"]
        for c in self.checks:
            status = "pass" if c.passed else "FAIL"
            lines.append(f"  [{status}] {c.name}: {c.detail}")
        return "\n".join(lines)


def _pairwise_sum(fns, args_a, args_b, shape):
    """Sum of |fn(a) - fn(b)| over a flat list of callables."""
    total = np.zeros(shape)
    for fn in fns:
        da = np.asarray(fn(*args_a), dtype=float)
        db = np.asarray(fn(*args_b), dtype=float)
        total = total + np.abs(da - db)
    return total


def validate_problem(p: ControlProblem, samples: int = 10_000, seed: int = 0) -> ValidationReport:
    """Sampled check of the structural hypotheses of a control problem.

    Symmetry of ``h`` and ``g``, continuity of all coefficients in time,
    joint Lipschitz bounds against the declared constant (1% slack), and
    boundedness of the terminal payoff.  Coefficients are arbitrary user
    code, so the checks are Monte Carlo rather than symbolic; failures are
    reported, not raised.
    """
    if samples < 1:
        raise ValueError("need samples >= 1")
    rng = np.random.default_rng(seed)
    d = p.brownian_dim
    T = p.horizon
    L = p.lipschitz_bound
    vs = np.asarray(p.control_set, dtype=float)

    t = rng.uniform(0.0, T, samples)
    x = rng.uniform(-10.0, 10.0, samples)
    xp = rng.uniform(-10.0, 10.0, samples)
    y = rng.uniform(-5.0, 5.0, samples)
    yp = rng.uniform(-5.0, 5.0, samples)
    z = rng.uniform(-5.0, 5.0, samples)
    zp = rng.uniform(-5.0, 5.0, samples)
    v = rng.choice(vs, samples)
    vp = rng.choice(vs, samples)

    checks = []

    # (A1) / (H4)(i): symmetry of the coefficient and generator arrays.
    def symmetry_gap(array, args):
        worst = 0.0
        for i in range(d):
            for j in range(i + 1, d):
                gap = np.abs(
                    np.asarray(array[i][j](*args), dtype=float)
                    - np.asarray(array[j][i](*args), dtype=float)
                )
                worst = max(worst, float(np.max(gap)))
        return worst

    h_gap = symmetry_gap(p.h, (t, x, v))
    checks.append(
        CheckResult("(A1) h symmetry", h_gap <= 1e-12, h_gap, f"max |h_ij - h_ji| = {h_gap:.2e}")
    )
    g_gap = symmetry_gap(p.g, (t, x, y, z, v))
    checks.append(
        CheckResult("(H4)(i) g symmetry", g_gap <= 1e-12, g_gap, f"max |g_ij - g_ji| = {g_gap:.2e}")
    )

    coeff_fns = [p.b] + [p.h[i][j] for i in range(d) for j in range(d)] + list(p.sigma)
    gen_fns = [p.f] + [p.g[i][j] for i in range(d) for j in range(d)]

    # (A2) / (H4)(ii): continuity in t.  A coarse scan finds candidate jump
    # locations; bisection shrinks the bracketing interval to rounding width,
    # where a continuous coefficient must have a vanishing increment.
    batch = min(samples, 256)

    def continuity_gap(fns, make_args):
        worst = 0.0
        n_tiles = 100
        width = T / n_tiles
        anchors = np.arange(n_tiles) * width  # tiles cover [0, T] completely
        for fn in fns:
            def jump(t1, t2):
                va = np.asarray(fn(*make_args(np.full(batch, t1))), dtype=float)
                vb = np.asarray(fn(*make_args(np.full(batch, t2))), dtype=float)
                return float(np.max(np.abs(vb - va) / (1.0 + np.abs(va))))

            coarse = [jump(a, a + width) for a in anchors]
            if max(coarse) <= 1e-9:
                continue
            lo = anchors[int(np.argmax(coarse))]
            hi = lo + width
            for _ in range(60):
                mid = 0.5 * (lo + hi)
                if jump(lo, mid) >= jump(mid, hi):
                    hi = mid
                else:
                    lo = mid
            worst = max(worst, jump(lo, hi))
        return worst

    c_gap = continuity_gap(coeff_fns, lambda tt: (tt, x[:batch], v[:batch]))
    checks.append(
        CheckResult(
            "(A2) coefficient continuity in t",
            c_gap <= 1e-6,
            c_gap,
            f"max relative jump over a rounding-width interval is {c_gap:.2e}",
        )
    )
    gcont = continuity_gap(gen_fns, lambda tt: (tt, x[:batch], y[:batch], z[:batch], v[:batch]))
    checks.append(
        CheckResult(
            "(H4)(ii) generator continuity in t",
            gcont <= 1e-6,
            gcont,
            f"max relative jump over a rounding-width interval is {gcont:.2e}",
        )
    )

    # (A3): joint Lipschitz bound of (b, h, sigma) in (x, v).
    num = _pairwise_sum(coeff_fns, (t, x, v), (t, xp, vp), t.shape)
    den = np.abs(x - xp) + np.abs(v - vp)
    mask = den > 1e-9
    ratio_a3 = float(np.max(num[mask] / den[mask])) if np.any(mask) else 0.0
    checks.append(
        CheckResult(
            "(A3) coefficient Lipschitz bound",
            ratio_a3 <= L * 1.01,
            ratio_a3,
            f"max sampled ratio {ratio_a3:.4f} vs declared L = {L:g}",
        )
    )

    # (H4)(iii): joint Lipschitz bound of (f, g) in (x, y, z, v) and of phi in x.
    num = _pairwise_sum(gen_fns, (t, x, y, z, v), (t, xp, yp, zp, vp), t.shape)
    den = np.abs(x - xp) + np.abs(y - yp) + np.abs(z - zp) + np.abs(v - vp)
    mask = den > 1e-9
    ratio_gen = float(np.max(num[mask] / den[mask])) if np.any(mask) else 0.0
    phi_num = np.broadcast_to(
        np.abs(np.asarray(p.phi(x), dtype=float) - np.asarray(p.phi(xp), dtype=float)), t.shape
    )
    phi_den = np.abs(x - xp)
    mask = phi_den > 1e-9
    ratio_phi = float(np.max(phi_num[mask] / phi_den[mask])) if np.any(mask) else 0.0
    worst = max(ratio_gen, ratio_phi)
    checks.append(
        CheckResult(
            "(H4)(iii) generator and terminal Lipschitz bound",
            worst <= L * 1.01,
            worst,
            f"max sampled ratio {worst:.4f} vs declared L = {L:g}",
        )
    )

    # Boundedness of phi: the sampled sup must stop growing with the range.
    x_small = rng.uniform(-1e3, 1e3, samples)
    x_large = rng.uniform(-1e6, 1e6, samples)
    sup_small = float(np.max(np.abs(np.asarray(p.phi(x_small), dtype=float))))
    sup_large = float(np.max(np.abs(np.asarray(p.phi(x_large), dtype=float))))
    bounded = sup_large <= 1.01 * sup_small + 1e-9
    checks.append(
        CheckResult(
            "terminal boundedness",
            bounded,
            sup_large,
            f"sup |phi| is {sup_small:.4g} on |x|<=1e3 and {sup_large:.4g} on |x|<=1e6",
        )
    )

    return ValidationReport(problem_name=p.name, samples=samples, checks=tuple(checks))


# ---------------------------------------------------------------------------
# Problem catalog
# ---------------------------------------------------------------------------

PAYOFF_NAMES = ("square", "neg-square", "identity", "call", "neg-abs", "cos", "constant")


def payoff_function(kind: str, scale: float = 1.0, clamp: float = 100.0) -> Payoff:
    """Named payoff, scaled then clamped into [-clamp, clamp]."""
    if clamp <= 0.0:
        raise CatalogError(f"clamp must be positive, got {clamp}")
    bases = {
        "square": lambda x: x * x,
        "neg-square": lambda x: -(x * x),
        "identity": lambda x: x,
        "call": lambda x: np.maximum(x, 0.0),
        "neg-abs": lambda x: -np.abs(x),
        "cos": np.cos,
        "constant": lambda x: np.ones_like(x),
    }
    if kind not in bases:
        raise CatalogError(f"unknown payoff '{kind}', expected one of {PAYOFF_NAMES}")
    base = bases[kind]

    def phi(x):
        x = np.asarray(x, dtype=float)
        return np.clip(scale * base(x), -clamp, clamp)

    return phi


def _payoff_lipschitz(kind: str, scale: float, clamp: float) -> float:
    """Global Lipschitz constant of the clamped payoff."""
    s = abs(scale)
    if kind in ("square", "neg-square"):
        # Slope saturates at the clamp boundary |x| = sqrt(clamp/s).
        return 2.0 * math.sqrt(s * clamp) if s > 0 else 0.0
    if kind in ("identity", "call", "neg-abs", "cos"):
        return s
    return 0.0  # constant


CATALOG_NAMES = ("pure-gbm", "drift-control", "linear-generator", "quadratic-cell", "full-coupled")

_CATALOG_DEFAULTS = {
    "pure-gbm": {"phi": "square", "phi_scale": 1.0, "clamp": 100.0, "horizon": 1.0},
    "drift-control": {
        "phi": "identity",
        "phi_scale": 1.0,
        "clamp": 100.0,
        "horizon": 1.0,
        "n_controls": 11,
        "sigma0": 0.1,
    },
    "linear-generator": {
        "phi": "square",
        "phi_scale": 1.0,
        "clamp": 100.0,
        "horizon": 1.0,
        "c0": 0.5,
        "c1": 0.1,
    },
    "quadratic-cell": {"phi": "square", "phi_scale": 1.0, "clamp": 2.0, "horizon": 1.0},
    "full-coupled": {
        "phi": "square",
        "phi_scale": 1.0,
        "clamp": 4.0,
        "horizon": 1.0,
        "kappa": 0.3,
        "n_controls": 5,
    },
}


def catalog_problem(name: str, params: dict | None = None) -> ControlProblem:
    """Build one of the built-in control problems.

    All catalog entries satisfy the structural hypotheses by construction:
    coefficients are globally Lipschitz, payoffs are clamped at a
    configurable bound, and the declared Lipschitz constant covers every
    sampled ratio.
    """
    if name not in _CATALOG_DEFAULTS:
        raise CatalogError(f"unknown catalog problem '{name}', expected one of {CATALOG_NAMES}")
    cfg = dict(_CATALOG_DEFAULTS[name])
    params = dict(params or {})
    unknown = set(params) - set(cfg)
    if unknown:
        raise CatalogError(f"unknown parameters {sorted(unknown)} for '{name}'")
    cfg.update(params)

    horizon = float(cfg["horizon"])
    if horizon <= 0.0:
        raise CatalogError(f"horizon must be positive, got {horizon}")
    clamp = float(cfg["clamp"])
    phi_kind = str(cfg["phi"])
    phi_scale = float(cfg["phi_scale"])
    phi = payoff_function(phi_kind, phi_scale, clamp)
    phi_L = max(_payoff_lipschitz(phi_kind, phi_scale, clamp), 1e-6)

    if name == "pure-gbm":
        return scalar_problem(
            sigma=lambda t, x, v: 1.0,
            phi=phi,
            control_set=(0.0,),
            horizon=horizon,
            lipschitz_bound=max(1.0, phi_L),
            name=name,
        )

    if name == "drift-control":
        n_controls = int(cfg["n_controls"])
        if n_controls < 1:
            raise CatalogError("n_controls must be positive")
        sigma0 = float(cfg["sigma0"])
        return scalar_problem(
            b=lambda t, x, v: v,
            sigma=lambda t, x, v: sigma0,
            phi=phi,
            control_set=np.linspace(-1.0, 1.0, n_controls),
            horizon=horizon,
            lipschitz_bound=max(1.0, phi_L),
            name=name,
        )

    if name == "linear-generator":
        c0 = float(cfg["c0"])
        c1 = float(cfg["c1"])
        return scalar_problem(
            sigma=lambda t, x, v: 1.0,
            f=lambda t, x, y, z, v: c0 + c1 * y,
            phi=phi,
            control_set=(0.0,),
            horizon=horizon,
            lipschitz_bound=max(1.0, abs(c1), phi_L),
            name=name,
        )

    if name == "quadratic-cell":
        return scalar_problem(
            sigma=lambda t, x, v: 1.0,
            phi=phi,
            control_set=(0.0,),
            horizon=horizon,
            lipschitz_bound=max(1.0, phi_L),
            name=name,
        )

    # full-coupled: every coefficient active, generator of the quadratic
    # variation linear in z with weight kappa.
    kappa = float(cfg["kappa"])
    n_controls = int(cfg["n_controls"])
    if n_controls < 1:
        raise CatalogError("n_controls must be positive")
    return scalar_problem(
        b=lambda t, x, v: 0.3 * v + 0.2 * np.sin(x),
        h=lambda t, x, v: 0.2 * np.cos(x),
        sigma=lambda t, x, v: 0.8 + 0.1 * np.tanh(x),
        f=lambda t, x, y, z, v: 0.2 * np.cos(x) * v - 0.1 * y + 0.1 * z,
        g=lambda t, x, y, z, v: kappa * z,
        phi=phi,
        control_set=np.linspace(-1.0, 1.0, n_controls),
        horizon=horizon,
        lipschitz_bound=max(1.0, abs(kappa), phi_L),
        name=name,
    )
