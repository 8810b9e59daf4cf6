"""Sphere-valued minimizing movements with an age-structured delay and their friction limit."""
from .density import (
    DensityState,
    InvariantViolation,
    analytic_constant_rate_density,
    init_density,
    run_density,
    step_density,
    zeroth_moment_residual,
)
from .expr import ExprDomainError, ExprError, ExprSyntaxError, eval_expr, parse_rate_expression, to_source
from .flow import (
    EnergyInequalityError,
    HistoryBuffer,
    MinimizerError,
    delay_operator_L,
    dissipation,
    elongation_V,
    energy,
    energy_gradient,
    lagrange_multiplier,
    minimize_step,
    run_flow,
)
from .grids import Grids, c0_error, dirichlet_energy, discrete_laplacian, l1_x, l2_x, linf_x, yt_norm
from .harmonic import exact_circle_solution, run_limit, step_limit
from .limit_density import init_layer_setup, layer_decay_series, solve_rho0, step_initial_layer
from .model import (
    Bounds,
    ConfigError,
    HypothesisError,
    ModelProblem,
    NumericsParams,
    load_problem,
    make_grids,
    make_problem,
    validate_hypotheses,
)

__version__ = "0.1.0"
