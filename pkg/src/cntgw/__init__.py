"""Entropic Gromov-Wasserstein solvers for costs of conditionally negative type."""

from .divergence import (
    FlowResult,
    GwValueReport,
    PositionGradient,
    SgwResult,
    ambient_gradient,
    constant_value,
    egw_gradient,
    feature_gradients,
    fourth_moment,
    gradient_flow,
    gw_loss_bruteforce,
    gw_value_report,
    quartic_loss,
    sgw,
)
from .kernels import (
    CenteredKernel,
    CntDiagnostic,
    CostSpec,
    EmbeddedMeasure,
    KpcaResult,
    cnt_diagnostic,
    cost_gradients,
    cost_matrix,
    covariance_spectrum,
    embed_measure,
    kernel_from_cost,
    kernel_pca,
    load_matrix_payload,
    parse_cost_spec,
    squared_distances,
)
from .measures import (
    DenseCoupling,
    DiscreteMeasure,
    ImplicitCoupling,
    ensure_dir,
    kl_divergence,
    load_coupling,
    load_point_cloud,
    marginal_error,
    save_coupling,
    save_point_cloud,
)
from .sinkhorn import (
    DenseCost,
    SinkhornConfig,
    SinkhornResult,
    SquaredEuclideanCost,
    eot_primal_value,
    sinkhorn,
    transport_cost,
)
from .solvers import (
    EgwConfig,
    EgwResult,
    SolverError,
    SolveTrace,
    coarsen,
    egw_objective,
    gamma_step,
    make_config,
    pi_step,
    random_gamma,
    solve_adaptive,
    solve_cnt_gw,
    solve_entropic_gw,
    solve_kernel_gw,
    solve_multiscale,
)

__version__ = "0.1.0"
