"""Solver toolkit for optimal-transport distributionally robust optimization
with affine decision rules and state-dependent Mahalanobis transport costs."""

from .model import (
    CostField,
    Decision,
    DroProblem,
    LossSpec,
    SampleSet,
    callback_cost,
    constant_cost,
    identity_cost,
    load_csv,
    make_hinge_loss,
    make_logistic_loss,
    make_squared_loss,
    quadratic_form,
    scaled_identity_cost,
)
from .dual import (
    InnerSolution,
    SubgradientSample,
    classify_domain,
    dual_objective,
    fallback_maximize,
    grad_robust_loss,
    inner_maximize,
    inner_objective,
    squared_loss_closed_form,
    subgrad_robust_loss,
)
from .regions import (
    ConstantsBundle,
    build_constants,
    estimate_L_bounds,
    lambda_thr,
    lambda_thr_prime,
    project_U_eta,
    project_W,
)
from .optimizer import (
    RunTrace,
    StepSchedule,
    line_search_outer,
    rate_diagnostic,
    sgd_nonsmooth,
    sgd_smooth,
    sgd_two_timescale,
    solve_lambda_star,
)
from .worstcase import WorstCaseTransport, comparative_statics, worst_case

__version__ = "0.1.0"
