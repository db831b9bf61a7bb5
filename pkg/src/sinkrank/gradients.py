"""Differentiation of the smoothed rank/sort pipeline.

Two independent routes produce gradients with respect to the input
values:

* an exact reverse-mode sweep through the recorded log-domain updates
  (the derivative of the finitely-iterated map, not of the fixed point),
  which also yields gradients with respect to the input weights;
* the closed-form fixed-point route: differentiate the stationarity
  conditions ``u .* Kv = a``, ``v .* K'u = b`` and solve the resulting
  block-linear system.

The block system is singular by construction: scaling ``u`` up and ``v``
down by a common factor leaves the coupling unchanged, so the Jacobian
of the stationarity map has the null vector (u, -v) and rank n+m-1.
The solve therefore uses a minimum-norm least-squares factorization;
gradients chained through the rank/sort outputs are invariant to the
gauge component, which is validated against finite differences and the
unrolled route in the tests.

A third route, plain central finite differences, closes the triangle.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ._kernels import softmin_last
from .errors import SingularSystemError
from .measures import (
    CostMatrix,
    CostSpec,
    SQUASH_FUNCTIONS,
    build_cost,
    squash,
    uniform_weights,
)
from .sinkhorn import SinkhornState, _resolve_target

__all__ = [
    "Tape",
    "forward_with_tape",
    "vjp_unrolled",
    "jacobian_implicit",
    "implicit_gradients",
    "finite_diff_check",
]

_CONSTANT_TOL = 1e-12


def _squash_with_aux(x, squashing):
    """Squashed values plus the intermediates the chain rule needs."""
    if squashing == "none":
        return x.copy(), None, None
    if squashing not in SQUASH_FUNCTIONS:
        raise ValueError(f"unknown squashing function {squashing!r}")
    centered = x - x.mean()
    norm = np.linalg.norm(centered)
    if norm < _CONSTANT_TOL:
        # constant-vector fallback: output is locally independent of x
        return squash(x, squashing), None, None
    sigma = norm / np.sqrt(x.size)
    z = centered / sigma
    return SQUASH_FUNCTIONS[squashing](z), z, sigma


def _squash_chain_vjp(xt_bar, x, z, sigma, squashing):
    """Pull a cotangent on the squashed values back to the raw values.

    The standardization couples every coordinate, so this Jacobian is
    dense: d z_k = (e_k - 1/n)/sigma - d_k d / (n sigma^3).
    """
    if squashing == "none":
        return xt_bar.copy()
    if z is None:
        return np.zeros_like(x)
    if squashing == "logistic":
        s = 1.0 / (1.0 + np.exp(-z))
        gprime = s * (1.0 - s)
    else:
        gprime = 1.0 / (np.pi * (1.0 + z * z))
    zbar = xt_bar * gprime
    n = x.size
    centered = x - x.mean()
    return (zbar - zbar.mean()) / sigma - centered * (zbar @ centered) / (
        n * sigma**3
    )


@dataclass
class Tape:
    """Recorded forward pass of the log-domain pipeline.

    Stores the potential sequence of every sweep (so the reverse pass
    can rebuild each iteration's softmax weights), the cost matrix and
    its partials, the squash intermediates, and the outputs.  Replaying
    reproduces the final potentials bitwise.
    """

    x: np.ndarray
    a: np.ndarray
    b: np.ndarray
    y: np.ndarray
    h: CostSpec
    epsilon: float
    eta: float
    squashing: str
    num_sweeps: int
    converged: bool
    col_error: float
    squashed: np.ndarray
    squash_z: np.ndarray | None
    squash_sigma: float | None
    cost: np.ndarray
    cost_grad: np.ndarray
    alphas: np.ndarray
    betas: np.ndarray
    beta_refreshed: np.ndarray
    s_ranks: np.ndarray
    s_sorts: np.ndarray

    def replay(self) -> "Tape":
        """Recompute the forward pass with the recorded inputs."""
        return forward_with_tape(
            self.x,
            self.a,
            self.b,
            self.y,
            h=self.h,
            epsilon=self.epsilon,
            eta=self.eta,
            max_iters=self.num_sweeps,
            num_sweeps=self.num_sweeps,
            squashing=self.squashing,
        )

    def final_state(self) -> SinkhornState:
        return SinkhornState(
            mode="log-domain",
            epsilon=self.epsilon,
            alpha=self.alphas[-1],
            beta=self.betas[-1],
            cost=self.cost,
            iterations_used=self.num_sweeps,
            converged=self.converged,
        )

    def cost_matrix(self) -> CostMatrix:
        return CostMatrix(
            entries=self.cost, row_support=self.squashed, col_support=self.y
        )


def forward_with_tape(
    x,
    a=None,
    b=None,
    y=None,
    h: CostSpec | None = None,
    epsilon: float = 1e-2,
    eta: float = 1e-3,
    max_iters: int = 5000,
    num_sweeps: int | None = None,
    squashing: str = "logistic",
) -> Tape:
    """Run the rank/sort forward pass, recording per-sweep potentials.

    With ``num_sweeps`` set the loop runs exactly that many sweeps
    regardless of the tolerance, which pins the differentiated map for
    finite-difference comparisons.

    Weights are treated as free positive parameters (no sum-to-one
    check): gradients with respect to them only exist if the map is
    defined on a neighborhood of the simplex.  The operator surface in
    the sinkhorn module keeps the strict validation.
    """
    xv = np.asarray(x, dtype=np.float64)
    if xv.ndim != 1 or xv.size == 0 or not np.all(np.isfinite(xv)):
        raise ValueError("x must be a nonempty finite vector")
    av = uniform_weights(xv.size) if a is None else np.asarray(a, np.float64)
    if av.shape != xv.shape or np.any(av <= 0) or not np.all(np.isfinite(av)):
        raise ValueError("weights must be positive, finite and match x")
    target = _resolve_target(xv.size, b, y)
    h = h or CostSpec()
    bv, yv = target.weights, target.support
    if not (np.isfinite(epsilon) and epsilon > 0):
        raise ValueError(f"epsilon must be positive, got {epsilon!r}")
    xt, z, sigma = _squash_with_aux(xv, squashing)
    C = build_cost(xt, yv, h).entries
    n, m = C.shape
    eloga = epsilon * np.log(av)
    elogb = epsilon * np.log(bv)
    alpha = np.zeros(n)
    beta = np.zeros(m)
    alphas = [alpha.copy()]
    betas = [beta.copy()]
    limit = max_iters if num_sweeps is None else num_sweeps
    converged = False
    col_error = np.inf
    sweeps = 0
    for _ in range(limit):
        beta = elogb + softmin_last(
            C.T - alpha[None, :] - beta[:, None], epsilon
        ) + beta
        alpha = eloga + softmin_last(
            C - alpha[:, None] - beta[None, :], epsilon
        ) + alpha
        alphas.append(alpha.copy())
        betas.append(beta.copy())
        sweeps += 1
        plan = np.exp((alpha[:, None] + beta[None, :] - C) / epsilon)
        col_error = float(np.abs(plan.sum(axis=0) - bv).sum())
        if num_sweeps is None and col_error < eta:
            converged = True
            break
    if num_sweeps is not None:
        converged = col_error < eta
    beta_ref = elogb + softmin_last(
        C.T - alpha[None, :] - beta[:, None], epsilon
    ) + beta
    plan_rank = np.exp((alpha[:, None] + beta_ref[None, :] - C) / epsilon)
    plan_sort = np.exp((alpha[:, None] + beta[None, :] - C) / epsilon)
    bbar = np.cumsum(bv)
    ranks = n * (plan_rank * bbar[None, :]).sum(axis=1) / av
    sorts = (plan_sort * xv[:, None]).sum(axis=0) / bv
    diff = yv[None, :] - xt[:, None]
    return Tape(
        x=xv,
        a=av,
        b=bv,
        y=yv,
        h=h,
        epsilon=epsilon,
        eta=eta,
        squashing=squashing,
        num_sweeps=sweeps,
        converged=converged,
        col_error=col_error,
        squashed=xt,
        squash_z=z,
        squash_sigma=sigma,
        cost=C,
        cost_grad=-h.h_prime(diff),
        alphas=np.asarray(alphas),
        betas=np.asarray(betas),
        beta_refreshed=beta_ref,
        s_ranks=ranks,
        s_sorts=sorts,
    )


def _seeds(tape, seed_ranks, seed_sorts):
    n, m = tape.cost.shape
    gr = np.zeros(n) if seed_ranks is None else np.asarray(seed_ranks, np.float64)
    gs = np.zeros(m) if seed_sorts is None else np.asarray(seed_sorts, np.float64)
    if gr.shape != (n,) or gs.shape != (m,):
        raise ValueError(
            f"seed shapes {gr.shape}/{gs.shape} do not match outputs ({n},)/({m},)"
        )
    return gr, gs


def vjp_unrolled(
    tape: Tape,
    seed_ranks=None,
    seed_sorts=None,
    coordinates: str = "squashed",
):
    """Reverse-mode sweep through the recorded iterations.

    Returns ``(grad_x, grad_a)`` for the scalar
    ``<seed_ranks, s_ranks> + <seed_sorts, s_sorts>``.  This is the
    exact derivative of the finitely-iterated computational graph.
    ``coordinates="squashed"`` differentiates with respect to the
    squashed cost coordinates (the default); ``"raw"`` additionally
    applies the dense standardize-and-squash chain rule so the result
    matches finite differences of the raw-input pipeline.
    """
    if coordinates not in ("squashed", "raw"):
        raise ValueError(f"unknown coordinates {coordinates!r}")
    gr, gs = _seeds(tape, seed_ranks, seed_sorts)
    eps = tape.epsilon
    a, b, x = tape.a, tape.b, tape.x
    C = tape.cost
    n, m = C.shape
    bbar = np.cumsum(b)
    alpha_L = tape.alphas[-1]
    plan_rank = np.exp((alpha_L[:, None] + tape.beta_refreshed[None, :] - C) / eps)
    plan_sort = np.exp((alpha_L[:, None] + tape.betas[-1][None, :] - C) / eps)

    dC = np.zeros_like(C)
    dx_direct = np.zeros(n)
    da = np.zeros(n)

    # rank head: r_i = (n / a_i) * sum_j plan_rank_ij * bbar_j
    T = gr[:, None] * (n / a)[:, None] * bbar[None, :]
    da -= gr * (n * (plan_rank @ bbar)) / a**2
    dalpha = (T * plan_rank).sum(axis=1) / eps
    dbeta_ref = (T * plan_rank).sum(axis=0) / eps
    dC -= T * plan_rank / eps
    # refresh step: column-stochastic weights plan_rank / b
    W = plan_rank / b[None, :]
    dalpha -= (W * dbeta_ref[None, :]).sum(axis=1)
    dC += W * dbeta_ref[None, :]

    # sort head: s_j = (1 / b_j) * sum_i plan_sort_ij * x_i
    U = gs[None, :] * x[:, None] / b[None, :]
    dx_direct += (plan_sort * (gs / b)[None, :]).sum(axis=1)
    dalpha += (U * plan_sort).sum(axis=1) / eps
    dbeta = (U * plan_sort).sum(axis=0) / eps
    dC -= U * plan_sort / eps

    # reverse the sweeps; each update is a softmin whose weights are
    # rebuilt from the recorded potentials
    for t in range(tape.num_sweeps, 0, -1):
        alpha_prev = tape.alphas[t - 1]
        alpha_t = tape.alphas[t]
        beta_t = tape.betas[t]
        V = np.exp((alpha_t[:, None] + beta_t[None, :] - C) / eps) / a[:, None]
        da += dalpha * eps / a
        dbeta -= (V * dalpha[:, None]).sum(axis=0)
        dC += V * dalpha[:, None]
        W = np.exp((alpha_prev[:, None] + beta_t[None, :] - C) / eps) / b[None, :]
        dalpha = -(W * dbeta[None, :]).sum(axis=1)
        dC += W * dbeta[None, :]
        dbeta = np.zeros(m)
    # the initial potentials are constants; dalpha stops here

    dxt = (dC * tape.cost_grad).sum(axis=1)
    if coordinates == "raw":
        grad_x = _squash_chain_vjp(
            dxt, x, tape.squash_z, tape.squash_sigma, tape.squashing
        )
    else:
        grad_x = dxt
    return grad_x + dx_direct, da


def jacobian_implicit(
    state: SinkhornState,
    cost: CostMatrix,
    x=None,
    h: CostSpec | None = None,
    form: str = "merged",
) -> np.ndarray:
    """Fixed-point Jacobian of the scalings (u, v) w.r.t. the cost inputs.

    Differentiates the stationarity conditions at a converged state and
    solves the (n+m) x (n+m) block system; returns the (n+m) x n matrix
    of sensitivities in the coordinates the cost matrix was built from.
    ``form`` selects between the merged block matrix and the factored
    variant (diagonal-shifted kernel times a diagonal rescaling); both
    agree to rounding.

    The system always carries the scaling-gauge null vector (u, -v), so
    a minimum-norm least-squares solve is used.  Rank deficiency beyond
    that single direction raises SingularSystemError.
    """
    if not state.converged:
        raise ValueError(
            "the fixed-point formula needs a converged state "
            f"(stopped after {state.iterations_used} sweeps)"
        )
    if form not in ("merged", "factored"):
        raise ValueError(f"unknown form {form!r}")
    h = h or CostSpec()
    if not isinstance(cost, CostMatrix):
        raise ValueError("pass the cost as a CostMatrix; its supports define the partials")
    C = cost.entries
    xt = cost.row_support if x is None else np.asarray(x, np.float64)
    yv = cost.col_support
    eps = state.epsilon
    u, v, K = state.u, state.v, state.kernel
    if not (np.all(np.isfinite(u)) and np.all(np.isfinite(v))):
        raise ValueError(
            "scalings overflow at this epsilon; the implicit route needs "
            "moderate regularization"
        )
    n, m = C.shape
    Kv = K @ v
    Ktu = K.T @ u
    # dK_ij/dx_i = -(c'_x/eps) K_ij with c'_x = -h'(y_j - x_i)
    delta = (h.h_prime(yv[None, :] - xt[:, None]) / eps) * K
    top = np.diag(u * (delta @ v))
    bottom = (v[:, None] * delta.T) * u[None, :]
    Jxf = np.vstack([top, bottom])
    if form == "merged":
        system = np.block(
            [[np.diag(Kv), u[:, None] * K], [v[:, None] * K.T, np.diag(Ktu)]]
        )
        rhs = Jxf
    else:
        z = np.concatenate([u, v])
        lam = np.block([[np.zeros((n, n)), K], [K.T, np.zeros((m, m))]])
        system = np.diag(np.concatenate([Kv / u, Ktu / v])) + lam
        rhs = Jxf / z[:, None]
    solution, _, rank, svals = np.linalg.lstsq(system, rhs, rcond=None)
    # the solve must be consistent: the scaling gauge (and, at small
    # epsilon, directions suppressed to machine zero) are harmless as
    # long as the right-hand side lies in the range
    residual = np.abs(system @ solution - rhs).max()
    scale = max(np.abs(rhs).max(), np.abs(system).max(), 1e-300)
    if residual > 1e-8 * scale:
        cond = float(svals[0] / svals[-1]) if svals[-1] > 0 else np.inf
        raise SingularSystemError(
            f"fixed-point system is inconsistent (rank {rank}, relative "
            f"residual {residual / scale:.3e})",
            cond,
        )
    return -solution


def implicit_gradients(
    tape: Tape,
    seed_ranks=None,
    seed_sorts=None,
    coordinates: str = "squashed",
):
    """Gradient w.r.t. the inputs via the fixed-point Jacobian.

    Chains ``jacobian_implicit`` through the rank/sort output formulas;
    the result is gauge-invariant.  The tape must come from a converged
    solve.  Returns ``grad_x`` only (the fixed-point route does not
    cover the weights).
    """
    if coordinates not in ("squashed", "raw"):
        raise ValueError(f"unknown coordinates {coordinates!r}")
    gr, gs = _seeds(tape, seed_ranks, seed_sorts)
    state = tape.final_state()
    cost = tape.cost_matrix()
    J = jacobian_implicit(state, cost, h=tape.h)
    eps = tape.epsilon
    n, m = tape.cost.shape
    a, b, x, yv, xt = tape.a, tape.b, tape.x, tape.y, tape.squashed
    u, v, K = state.u, state.v, state.kernel
    du, dv = J[:n, :], J[n:, :]
    bbar = np.cumsum(b)
    delta = (tape.h.h_prime(yv[None, :] - xt[:, None]) / eps) * K
    # rank head r = (n/a) .* u .* K(v .* bbar)
    Kvb = K @ (v * bbar)
    dr = (n / a)[:, None] * (Kvb[:, None] * du + u[:, None] * ((K * bbar[None, :]) @ dv))
    dr += np.diag((n / a) * u * (delta @ (v * bbar)))
    # sort head s = (1/b) .* v .* K^T (u .* x)
    Kux = K.T @ (u * x)
    ds = (1.0 / b)[:, None] * (Kux[:, None] * dv + v[:, None] * (K.T @ (x[:, None] * du)))
    ds += (1.0 / b)[:, None] * v[:, None] * (delta.T * (u * x)[None, :])
    dphi_dxt = gr @ dr + gs @ ds
    if coordinates == "raw":
        grad = _squash_chain_vjp(
            dphi_dxt, x, tape.squash_z, tape.squash_sigma, tape.squashing
        )
    else:
        grad = dphi_dxt
    plan = u[:, None] * K * v[None, :]
    grad = grad + (plan * (gs / b)[None, :]).sum(axis=1)
    return grad


def finite_diff_check(fn, x, step: float = 1e-5):
    """Central-difference gradient estimate of a scalar function.

    Returns ``(gradient, step)``; per-coordinate symmetric differences.
    """
    if step <= 0:
        raise ValueError(f"step must be positive, got {step!r}")
    xv = np.asarray(x, dtype=np.float64)
    grad = np.empty(xv.size)
    for i in range(xv.size):
        bump = np.zeros_like(xv)
        bump[i] = step
        grad[i] = (fn(xv + bump) - fn(xv - bump)) / (2.0 * step)
    return grad, step
