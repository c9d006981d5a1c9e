"""Optimal transport as MAP inference in collective graphical models.

Entropic OT by Sinkhorn scaling, OT with noisy marginal observations by
generalized scaling with KL proximal steps, and histogram interpolation on
paths, continuous-time Markov chains, and trees, plus independent oracles
backing the test suite.
"""

from .core import (
    CGMOTError,
    CapabilityError,
    ConfigurationError,
    ConvergenceError,
    CostMatrix,
    CTMCModel,
    Histogram,
    InfeasibleSupportError,
    Kernel,
    NumericError,
    SolveReport,
    SolverOptions,
    TransportPlan,
    TreeCGM,
    ValidationError,
    as_histogram,
    build_grid_rate_matrix,
    cost_from_kernel,
    guarded_divide,
)
from .entropic import (
    EntropicObjectiveValue,
    cgm_log_joint_approx,
    sinkhorn_distance,
    sinkhorn_plan,
    transport_cost,
)
from .interpolate import (
    InterpolationResult,
    PathInterpolationProblem,
    expm_action,
    interpolate_all_k,
    interpolate_path,
    interpolate_path_loopy,
    kernel_power_apply,
)
from .noisy import (
    NoiseModel,
    exact_marginal,
    gaussian_noise,
    generalized_kl,
    kl_prox,
    noisy_objective,
    noisy_ot_solve,
    poisson_noise,
)
from .trees import TreeSolution, solve_tree, tree_objective

__version__ = "0.1.0"

__all__ = [
    "CGMOTError",
    "CapabilityError",
    "ConfigurationError",
    "ConvergenceError",
    "CostMatrix",
    "CTMCModel",
    "EntropicObjectiveValue",
    "Histogram",
    "InfeasibleSupportError",
    "InterpolationResult",
    "Kernel",
    "NoiseModel",
    "NumericError",
    "PathInterpolationProblem",
    "SolveReport",
    "SolverOptions",
    "TransportPlan",
    "TreeCGM",
    "TreeSolution",
    "ValidationError",
    "as_histogram",
    "build_grid_rate_matrix",
    "cgm_log_joint_approx",
    "cost_from_kernel",
    "exact_marginal",
    "expm_action",
    "gaussian_noise",
    "generalized_kl",
    "guarded_divide",
    "interpolate_all_k",
    "interpolate_path",
    "interpolate_path_loopy",
    "kernel_power_apply",
    "kl_prox",
    "noisy_objective",
    "noisy_ot_solve",
    "poisson_noise",
    "sinkhorn_distance",
    "sinkhorn_plan",
    "solve_tree",
    "transport_cost",
    "tree_objective",
]
