"""Entropy-regularized transport and the smoothed rank/sort operators.

Two solver modes produce the same coupling: plain multiplicative scaling
(fast, but its kernel exp(-C/eps) underflows at small eps) and the
log-domain form, which works with dual potentials and soft-minima and
never exponentiates anything unnormalized.

The smoothed operators map a weighted value vector against a sorted
target measure:

* ``s_rank``: each value gets a mass-weighted mixture of target
  cumulative weights, scaled into [0, n];
* ``s_sort``: each target gets a barycenter of the original values.

Update order within a sweep is column-potential first, then row, so row
marginals are exact at exit; the rank operator additionally refreshes
the column potential once so its output uses a column-exact coupling.
That makes the two conservation identities (<b, s_sort> == <a, x> and
<a, s_rank> == n <b, cumsum(b)>) hold to float precision at any
tolerance, not just in the limit.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Literal

import numpy as np

from . import _kernels
from .errors import KernelUnderflowError
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

__all__ = [
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
]

Mode = Literal["multiplicative", "log-domain"]

_UNDERFLOW_FLOOR = 1e-300


@dataclass(frozen=True)
class SinkhornConfig:
    """Solver settings: regularization, marginal tolerance, sweep cap, mode."""

    epsilon: float = 1e-2
    eta: float = 1e-3
    max_iters: int = 5000
    mode: Mode = "log-domain"

    def __post_init__(self):
        if not (np.isfinite(self.epsilon) and self.epsilon > 0):
            raise ValueError(f"epsilon must be positive, got {self.epsilon!r}")
        if not (np.isfinite(self.eta) and self.eta > 0):
            raise ValueError(f"eta must be positive, got {self.eta!r}")
        if self.max_iters < 1:
            raise ValueError(f"max_iters must be >= 1, got {self.max_iters!r}")
        if self.mode not in ("multiplicative", "log-domain"):
            raise ValueError(f"unknown mode {self.mode!r}")


@dataclass
class SinkhornState:
    """Dual potentials plus convergence metadata for one solve.

    ``alpha`` and ``beta`` are the log-domain potentials; in
    multiplicative mode the scalings are kept as computed and satisfy
    ``u = exp(alpha/epsilon)``, ``v = exp(beta/epsilon)`` up to float
    rounding.  ``converged`` reports whether the column-marginal L1
    residual met the tolerance before the sweep cap; exhausting the cap
    is not an error, the caller decides what to do with the state.
    """

    mode: Mode
    epsilon: float
    alpha: np.ndarray
    beta: np.ndarray
    cost: np.ndarray
    iterations_used: int
    converged: bool
    _u: np.ndarray | None = None
    _v: np.ndarray | None = None
    _kernel: np.ndarray | None = None

    @property
    def u(self):
        """Row scaling; overflows for very small epsilon in log mode."""
        if self._u is not None:
            return self._u
        return np.exp(self.alpha / self.epsilon)

    @property
    def v(self):
        if self._v is not None:
            return self._v
        return np.exp(self.beta / self.epsilon)

    @property
    def kernel(self):
        """Gibbs kernel exp(-C/epsilon); underflows for small epsilon."""
        if self._kernel is not None:
            return self._kernel
        return np.exp(-self.cost / self.epsilon)

    def plan(self) -> np.ndarray:
        """Transport plan implied by the current potentials/scalings."""
        if self.mode == "multiplicative":
            return self.u[:, None] * self.kernel * self.v[None, :]
        return np.exp(
            (self.alpha[:, None] + self.beta[None, :] - self.cost) / self.epsilon
        )

    def marginal_errors(self, a, b):
        """L1 distance of the plan's marginals to (a, b)."""
        P = self.plan()
        return (
            float(np.abs(P.sum(axis=1) - a).sum()),
            float(np.abs(P.sum(axis=0) - b).sum()),
        )


@dataclass(frozen=True)
class SoftResult:
    """Smoothed ranks (length n, in [0, n]) and sorts (length m)."""

    s_ranks: np.ndarray
    s_sorts: np.ndarray
    epsilon_used: float


def soft_min_rows(M, epsilon: float) -> np.ndarray:
    """Row-wise soft minimum ``-eps*log(sum_j exp(-M_ij/eps))``.

    Overflow-safe: the row minimum is factored out before
    exponentiation.  Accepts any (..., m) stack of row sets.
    """
    if not (np.isfinite(epsilon) and epsilon > 0):
        raise ValueError(f"epsilon must be positive, got {epsilon!r}")
    Mv = np.asarray(M, dtype=np.float64)
    if Mv.ndim < 1 or Mv.shape[-1] == 0:
        raise ValueError("need at least one column")
    if not np.all(np.isfinite(Mv)):
        raise ValueError("soft_min_rows requires finite entries")
    return _kernels.softmin_last(Mv, epsilon)


def _cost_entries(C) -> np.ndarray:
    entries = C.entries if isinstance(C, CostMatrix) else np.asarray(C, np.float64)
    if entries.ndim != 2 or entries.size == 0:
        raise ValueError(f"cost must be a nonempty matrix, got shape {entries.shape}")
    if not np.all(np.isfinite(entries)):
        raise ValueError("cost matrix contains non-finite entries")
    return entries


def _check_marginals(a, b, shape):
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != (shape[0],) or b.shape != (shape[1],):
        raise ValueError(
            f"marginal shapes {a.shape}/{b.shape} do not match cost {shape}"
        )
    if np.any(a <= 0) or np.any(b <= 0):
        raise ValueError("marginals must be strictly positive")
    return a, b


def sinkhorn_multiplicative(a, b, C, cfg: SinkhornConfig | None = None) -> SinkhornState:
    """Classic scaling iterations ``v <- b / K^T u``, ``u <- a / K v``.

    Stops once the column-marginal L1 residual drops below ``cfg.eta``
    (checked after the row update, which leaves row marginals exact).
    Raises KernelUnderflowError when ``exp(-C/eps)`` has lost an entire
    row or column to underflow, or when the scalings blow up; switch to
    log-domain mode in those regimes.
    """
    cfg = cfg or SinkhornConfig(mode="multiplicative")
    entries = _cost_entries(C)
    a, b = _check_marginals(a, b, entries.shape)
    eps = cfg.epsilon
    K = np.exp(-entries / eps)
    if K.max(axis=1).min() < _UNDERFLOW_FLOOR or K.max(axis=0).min() < _UNDERFLOW_FLOOR:
        raise KernelUnderflowError(
            f"exp(-C/epsilon) underflowed a whole row or column at "
            f"epsilon={eps!r}; use log-domain mode"
        )
    n = a.size
    u = np.ones(n)
    v = np.ones(b.size)
    converged = False
    it = 0
    while it < cfg.max_iters:
        it += 1
        v = b / (K.T @ u)
        u = a / (K @ v)
        if not (np.all(np.isfinite(u)) and np.all(np.isfinite(v))):
            raise KernelUnderflowError(
                f"scalings became non-finite at epsilon={eps!r} "
                f"(iteration {it}); use log-domain mode"
            )
        if np.abs(v * (K.T @ u) - b).sum() < cfg.eta:
            converged = True
            break
    with np.errstate(divide="ignore"):
        alpha = eps * np.log(u)
        beta = eps * np.log(v)
    return SinkhornState(
        mode="multiplicative",
        epsilon=eps,
        alpha=alpha,
        beta=beta,
        cost=entries,
        iterations_used=it,
        converged=converged,
        _u=u,
        _v=v,
        _kernel=K,
    )


def sinkhorn_log(a, b, C, cfg: SinkhornConfig | None = None) -> SinkhornState:
    """Stabilized log-domain iterations (column potential, then row).

    Potentials start at zero; each update is a soft-minimum of the
    slack matrix, so nothing unnormalized is ever exponentiated.
    Never raises on slow convergence: the returned state carries
    ``converged=False`` when the cap was reached.
    """
    cfg = cfg or SinkhornConfig()
    entries = _cost_entries(C)
    a, b = _check_marginals(a, b, entries.shape)
    alpha, beta, iters, conv = _kernels.log_solve_batch(
        entries[None], a[None], b[None], cfg.epsilon, cfg.eta, cfg.max_iters
    )
    return SinkhornState(
        mode="log-domain",
        epsilon=cfg.epsilon,
        alpha=alpha[0],
        beta=beta[0],
        cost=entries,
        iterations_used=int(iters[0]),
        converged=bool(conv[0]),
    )


def _beta_refresh_batch(cost, alpha, beta, b, epsilon):
    """One extra column-potential update; the resulting coupling has
    exact column marginals."""
    M = cost.transpose(0, 2, 1) - alpha[:, None, :] - beta[:, :, None]
    return epsilon * np.log(b) + _kernels.softmin_last(M, epsilon) + beta


def _resolve_target(n, b, y) -> TargetDescriptor:
    """Default target: uniform weights on the regular [0, 1] grid."""
    if b is None and y is None:
        return regular_grid_target(n)
    if y is None:
        b = np.asarray(b, dtype=np.float64)
        return TargetDescriptor(weights=b, support=regular_grid_target(b.size).support)
    y = np.asarray(y, dtype=np.float64)
    b = uniform_weights(y.size) if b is None else b
    return TargetDescriptor(weights=b, support=y)


def _squash_rows(X, squashing):
    if squashing == "none":
        return X.copy()
    return np.stack([squash(row, squashing) for row in X])


def solve_rank_sort_batched(
    X,
    A=None,
    b=None,
    y=None,
    h: CostSpec | None = None,
    cfg: SinkhornConfig | None = None,
    squashing: str = "logistic",
):
    """Smoothed ranks and sorts for a batch sharing one target measure.

    ``X`` is (S, n); ``A`` matches it or defaults to uniform rows.  All
    cost kernels are held as one (S, n, m) tensor and instances stop on
    their own tolerance, so outputs equal the unbatched operator applied
    row by row.

    Returns (ranks (S, n), sorts (S, m), list of SinkhornState).
    """
    X = np.asarray(X, dtype=np.float64)
    if X.dtype == object or X.ndim != 2:
        raise ValueError(f"batch must be a rectangular (S, n) array, got {X.shape}")
    S, n = X.shape
    if A is None:
        A = np.tile(uniform_weights(n), (S, 1))
    else:
        A = np.asarray(A, dtype=np.float64)
        if A.shape != X.shape:
            raise ValueError(f"weight batch {A.shape} does not match data {X.shape}")
    h = h or CostSpec()
    cfg = cfg or SinkhornConfig()
    A = np.stack(
        [DiscreteMeasure(weights=A[s], support=X[s]).weights for s in range(S)]
    )
    target = _resolve_target(n, b, y)
    bv, yv = target.weights, target.support
    squashed = _squash_rows(X, squashing)
    cost = np.stack([build_cost(squashed[s], yv, h).entries for s in range(S)])
    B = np.tile(bv, (S, 1))

    if cfg.mode == "multiplicative":
        states = [
            sinkhorn_multiplicative(A[s], bv, cost[s], cfg) for s in range(S)
        ]
        alpha = np.stack([st.alpha for st in states])
        beta = np.stack([st.beta for st in states])
        plan = np.stack([st.plan() for st in states])
        v_ref = np.stack([bv / (st.kernel.T @ st.u) for st in states])
        plan_rank = np.stack(
            [st.u[:, None] * st.kernel * v_ref[s][None, :] for s, st in enumerate(states)]
        )
    else:
        alpha, beta, iters, conv = _kernels.log_solve_batch(
            cost, A, B, cfg.epsilon, cfg.eta, cfg.max_iters
        )
        states = [
            SinkhornState(
                mode="log-domain",
                epsilon=cfg.epsilon,
                alpha=alpha[s],
                beta=beta[s],
                cost=cost[s],
                iterations_used=int(iters[s]),
                converged=bool(conv[s]),
            )
            for s in range(S)
        ]
        plan = np.exp((alpha[:, :, None] + beta[:, None, :] - cost) / cfg.epsilon)
        beta_r = _beta_refresh_batch(cost, alpha, beta, B, cfg.epsilon)
        plan_rank = np.exp(
            (alpha[:, :, None] + beta_r[:, None, :] - cost) / cfg.epsilon
        )

    bbar = np.cumsum(bv)
    ranks = n * (plan_rank * bbar[None, None, :]).sum(axis=2) / A
    sorts = (plan * X[:, :, None]).sum(axis=1) / bv[None, :]
    return ranks, sorts, states


def solve_rank_sort(
    x,
    a=None,
    b=None,
    y=None,
    h: CostSpec | None = None,
    cfg: SinkhornConfig | None = None,
    squashing: str = "logistic",
) -> tuple[SoftResult, SinkhornState]:
    """One-instance smoothed ranks and sorts, with the solver state."""
    xv = np.asarray(x, dtype=np.float64)
    if xv.ndim != 1:
        raise ValueError(f"x must be a vector, got shape {xv.shape}")
    A = None if a is None else np.asarray(a, dtype=np.float64)[None]
    cfg = cfg or SinkhornConfig()
    ranks, sorts, states = solve_rank_sort_batched(
        xv[None], A, b, y, h, cfg, squashing
    )
    result = SoftResult(
        s_ranks=ranks[0], s_sorts=sorts[0], epsilon_used=cfg.epsilon
    )
    return result, states[0]


def s_rank(x, a=None, b=None, y=None, h=None, cfg=None, squashing="logistic"):
    """Smoothed ranks of ``x``; entries lie in [0, n]."""
    return solve_rank_sort(x, a, b, y, h, cfg, squashing)[0].s_ranks


def s_sort(x, a=None, b=None, y=None, h=None, cfg=None, squashing="logistic"):
    """Smoothed sorted values of ``x`` (barycenters in original units)."""
    return solve_rank_sort(x, a, b, y, h, cfg, squashing)[0].s_sorts


def s_rank_batched(X, A=None, b=None, y=None, h=None, cfg=None, squashing="logistic"):
    """Rows of smoothed ranks for a rectangular batch."""
    return solve_rank_sort_batched(X, A, b, y, h, cfg, squashing)[0]


def s_sort_batched(X, A=None, b=None, y=None, h=None, cfg=None, squashing="logistic"):
    """Rows of smoothed sorts for a rectangular batch."""
    return solve_rank_sort_batched(X, A, b, y, h, cfg, squashing)[1]
