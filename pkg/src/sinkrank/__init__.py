"""sinkrank: differentiable ranking, sorting and quantiles via
entropy-regularized 1D optimal transport.

Exact sorting-based transport gives ground-truth generalized rank/sort
operators; their entropic regularization (solved by scaling iterations,
stabilized in the log domain) gives smooth, differentiable versions,
plus soft quantiles and a smoothed top-k classification loss.
"""

from ._kernels import backend as kernel_backend
from .errors import KernelUnderflowError, NumericalError, SingularSystemError
from .exact import (
    TransportPlan,
    hard_rank,
    hard_sort,
    k_rank,
    k_sort,
    northwest_corner,
    northwest_corner_runs,
    solve_exact,
    transport_cost,
)
from .gradients import (
    Tape,
    finite_diff_check,
    forward_with_tape,
    implicit_gradients,
    jacobian_implicit,
    vjp_unrolled,
)
from .losses import (
    LinearModel,
    QuantileSpec,
    TopKLossSpec,
    TrainConfig,
    TrainingTrace,
    TwoLayerModel,
    hard_quantile,
    least_quantile_objective,
    load_dataset,
    quantile_target,
    soft_quantile,
    soft_topk_loss,
    synthetic_linear_dataset,
    train_least_quantile,
    write_trace,
)
from .measures import (
    CostMatrix,
    CostSpec,
    DiscreteMeasure,
    TargetDescriptor,
    build_cost,
    regular_grid_target,
    squash,
    uniform_weights,
)
from .sinkhorn import (
    SinkhornConfig,
    SinkhornState,
    SoftResult,
    s_rank,
    s_rank_batched,
    s_sort,
    s_sort_batched,
    sinkhorn_log,
    sinkhorn_multiplicative,
    soft_min_rows,
    solve_rank_sort,
    solve_rank_sort_batched,
)

__version__ = "0.1.0"

__all__ = [
    "__version__",
    "kernel_backend",
    "NumericalError",
    "KernelUnderflowError",
    "SingularSystemError",
    "DiscreteMeasure",
    "TargetDescriptor",
    "CostSpec",
    "CostMatrix",
    "build_cost",
    "squash",
    "regular_grid_target",
    "uniform_weights",
    "TransportPlan",
    "hard_sort",
    "hard_rank",
    "northwest_corner",
    "northwest_corner_runs",
    "solve_exact",
    "transport_cost",
    "k_rank",
    "k_sort",
    "SinkhornConfig",
    "SinkhornState",
    "SoftResult",
    "soft_min_rows",
    "sinkhorn_multiplicative",
    "sinkhorn_log",
    "solve_rank_sort",
    "solve_rank_sort_batched",
    "s_rank",
    "s_sort",
    "s_rank_batched",
    "s_sort_batched",
    "Tape",
    "forward_with_tape",
    "vjp_unrolled",
    "jacobian_implicit",
    "implicit_gradients",
    "finite_diff_check",
    "TopKLossSpec",
    "QuantileSpec",
    "soft_topk_loss",
    "soft_quantile",
    "least_quantile_objective",
    "hard_quantile",
    "quantile_target",
    "LinearModel",
    "TwoLayerModel",
    "TrainConfig",
    "TrainingTrace",
    "train_least_quantile",
    "load_dataset",
    "write_trace",
    "synthetic_linear_dataset",
]
