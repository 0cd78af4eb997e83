"""Piecewise-linear vector-field approximation for two-point BVPs on [0, 1].

Workflow: define a :class:`~pwlbvp.model.Problem` (builtin, expression DSL or
custom callables), pick a mesh, run the dynamic-programming solver over a
discretized (value, slope) state grid, then polish the result with the
quasilinearized Newton refinement.
"""

from .dp import (
    DpConfig,
    DpState,
    DpTables,
    StateGrid,
    backtrack,
    brute_force_solve,
    discretize_states,
    forward_tabulate_general,
    forward_tabulate_separable,
    refine_tube,
    solve_dp,
    stage_cost,
    stiffness_diagnostics,
    transition_piece,
)
from .errfun import (
    ErrorAccumulator,
    Integrand,
    QuadratureRule,
    accumulate,
    piece_error_additive,
    piece_error_uniform,
    residual,
    total_error,
)
from .exceptions import (
    ConfigError,
    DomainError,
    EvalError,
    GuardExceeded,
    InfeasibleDiscretization,
    ParseError,
    PointwiseUnavailable,
    PwlBvpError,
)
from .expr import eval_expression, parse_expression, pretty
from .linflow import FundamentalMatrix, fundamental_matrix, mat_exp, propagate_piece, variation_of_constants
from .model import (
    Basis,
    BoundaryCondition,
    Mesh,
    Piece,
    Problem,
    PwlModel,
    eval_model,
    hermite_model,
    model_derivative,
    validate_model,
)
from .problems import builtin, expression_problem, make_control
from .refine import (
    RefineConfig,
    RefineState,
    apply_correction,
    boundary_eta_newton,
    boundary_eta_step,
    correction_pointwise_newton,
    correction_with_eta,
    correction_zero_iv,
    eta_objective,
    jacobian_at,
    make_state,
    optimal_eta,
    refine_loop,
)

__version__ = "0.1.0"

__all__ = [name for name in dir() if not name.startswith("_")]
