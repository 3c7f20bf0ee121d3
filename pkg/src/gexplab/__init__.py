"""Numerical laboratory for control under volatility uncertainty.

Sublinear expectations over an interval of volatility scenarios, the
nonlinear heat equation of the sublinear-normal distribution, backward
equations with a decreasing-martingale residual, the dynamic-programming
value function, and the associated fully nonlinear PDE, with built-in
cross-validation between the dynamic-programming and PDE routes.
"""

from .model import (
    CatalogError,
    CflError,
    ControlProblem,
    GFunction,
    GridSpec,
    UncertaintySet,
    ValidationReport,
    catalog_problem,
    eval_G,
    payoff_function,
    scalar_problem,
    validate_problem,
)
from .gheat import HeatField, g_normal_expectation, solve_g_heat
from .lattice import (
    FeedbackControl,
    PathBundle,
    VolatilityLattice,
    VolatilityScenario,
    conditional_g_expectation,
    constant_control,
    simulate_gsde,
    tower_check,
    worst_case_over_scenarios,
)
from .bsde import BsdeSolution, comparison_check, k_martingale_check, solve_gbsde
from .dpp import (
    ModuliRecord,
    ValueField,
    argmax_policy,
    backward_semigroup_step,
    cost_functional,
    dpp_consistency_check,
    regularity_report,
    value_function,
)
from .hjb import (
    OperatorProbe,
    SmoothTestFunction,
    assemble_H,
    dpp_hjb_distance,
    eval_F,
    eval_F0,
    local_ode_probe,
    operator_probe,
    polynomial_test_function,
    quadratic_test_function,
    solve_hjb,
    viscosity_residual,
    windowed_test_function,
)

__version__ = "0.1.0"
