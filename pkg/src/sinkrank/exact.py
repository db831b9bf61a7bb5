"""Exact (unregularized) 1D optimal transport via sorting.

For convex translation-invariant costs the 1D transport problem is
solved by matching mass in sorted order: sort the source support, run
the greedy north-west corner fill on the permuted weights, and undo the
permutation.  The resulting plan yields generalized rank and sort
operators (mass-weighted mixtures of target ranks, and barycenters of
source values) that reduce to the classical operators for uniform
same-size measures.

This module is the ground-truth oracle for the regularized solvers.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .measures import CostMatrix, CostSpec, DiscreteMeasure, TargetDescriptor

__all__ = [
    "TransportPlan",
    "hard_sort",
    "hard_rank",
    "northwest_corner",
    "northwest_corner_runs",
    "solve_exact",
    "k_rank",
    "k_sort",
    "transport_cost",
]

_MARGINAL_TOL = 1e-10
_MASS_MISMATCH_TOL = 1e-8


@dataclass(frozen=True)
class TransportPlan:
    """Nonnegative coupling with prescribed row and column marginals."""

    entries: np.ndarray
    row_marginal: np.ndarray
    col_marginal: np.ndarray

    def __post_init__(self):
        P = np.ascontiguousarray(self.entries, dtype=np.float64)
        a = np.ascontiguousarray(self.row_marginal, dtype=np.float64)
        b = np.ascontiguousarray(self.col_marginal, dtype=np.float64)
        if P.shape != (a.size, b.size):
            raise ValueError(
                f"plan shape {P.shape} does not match marginals ({a.size}, {b.size})"
            )
        if np.any(P < 0):
            raise ValueError("transport plan has negative entries")
        row_err = np.abs(P.sum(axis=1) - a).max()
        col_err = np.abs(P.sum(axis=0) - b).max()
        if row_err > _MARGINAL_TOL or col_err > _MARGINAL_TOL:
            raise ValueError(
                f"marginal violation: row {row_err:.3e}, col {col_err:.3e} "
                f"(tolerance {_MARGINAL_TOL})"
            )
        for name, arr in (("entries", P), ("row_marginal", a), ("col_marginal", b)):
            arr.setflags(write=False)
            object.__setattr__(self, name, arr)

    @property
    def shape(self):
        return self.entries.shape

    def support_size(self):
        return int(np.count_nonzero(self.entries))


def hard_sort(x):
    """Sorted copy of ``x`` and the (1-based) sorting permutation.

    Ties are broken by original position, so the permutation is the
    stable argsort.  ``sorted == x[sigma - 1]`` is nondecreasing.
    """
    xv = np.asarray(x, dtype=np.float64)
    if xv.ndim != 1 or xv.size == 0:
        raise ValueError(f"x must be a nonempty vector, got shape {xv.shape}")
    order = np.argsort(xv, kind="stable")
    return xv[order], order + 1


def hard_rank(x):
    """1-based ranks of the entries of ``x`` (inverse of the stable sort)."""
    _, sigma = hard_sort(x)
    ranks = np.empty(sigma.size, dtype=np.int64)
    ranks[sigma - 1] = np.arange(1, sigma.size + 1)
    return ranks


def northwest_corner_runs(a, b):
    """Sparse north-west corner fill: row indices, column indices, masses.

    Greedy from the top-left cell: assign the minimum of the remaining
    row and column mass, then advance whichever index was exhausted.
    At most n + m - 1 cells are visited.
    """
    av = np.asarray(a, dtype=np.float64)
    bv = np.asarray(b, dtype=np.float64)
    if av.ndim != 1 or bv.ndim != 1 or av.size == 0 or bv.size == 0:
        raise ValueError("marginals must be nonempty vectors")
    if np.any(av <= 0) or np.any(bv <= 0):
        raise ValueError("marginals must be strictly positive")
    if abs(av.sum() - bv.sum()) > _MASS_MISMATCH_TOL:
        raise ValueError(
            f"total masses differ: {av.sum()!r} vs {bv.sum()!r} "
            f"(tolerance {_MASS_MISMATCH_TOL})"
        )
    n, m = av.size, bv.size
    rows = np.empty(n + m - 1, dtype=np.int64)
    cols = np.empty(n + m - 1, dtype=np.int64)
    mass = np.empty(n + m - 1, dtype=np.float64)
    remaining_row = float(av[0])
    remaining_col = float(bv[0])
    i = j = k = 0
    while True:
        move = min(remaining_row, remaining_col)
        rows[k], cols[k], mass[k] = i, j, move
        k += 1
        remaining_row -= move
        remaining_col -= move
        at_last_row, at_last_col = i == n - 1, j == m - 1
        if at_last_row and at_last_col:
            break
        # advance the exhausted side; never step past the last row/column
        if (remaining_row <= remaining_col or at_last_col) and not at_last_row:
            i += 1
            remaining_row = float(av[i])
        else:
            j += 1
            remaining_col = float(bv[j])
    return rows[:k], cols[:k], mass[:k]


def northwest_corner(a, b) -> TransportPlan:
    """Dense north-west corner plan for marginals ``a`` and ``b``."""
    rows, cols, mass = northwest_corner_runs(a, b)
    av = np.asarray(a, dtype=np.float64)
    bv = np.asarray(b, dtype=np.float64)
    P = np.zeros((av.size, bv.size))
    np.add.at(P, (rows, cols), mass)
    # absorb the float drift of the greedy subtraction so the plan meets
    # the marginal tolerance exactly where it can
    P[-1, -1] += av.sum() - P.sum()
    return TransportPlan(entries=P, row_marginal=av, col_marginal=bv)


def solve_exact(a, x, b, y, h: CostSpec | None = None) -> TransportPlan:
    """Optimal plan between (a, x) and the sorted target (b, y).

    Sorts ``x`` (the target support is already increasing), fills the
    north-west corner plan on the permuted weights and un-permutes its
    rows.  Optimal for every convex cost ``h``; for p = 1 the optimum
    may not be unique and this construction picks one deterministically.
    """
    h = h or CostSpec()
    source = DiscreteMeasure(weights=a, support=x)
    target = TargetDescriptor(weights=b, support=y)
    order = np.argsort(source.support, kind="stable")
    sorted_plan = northwest_corner(source.weights[order], target.weights)
    inverse = np.empty_like(order)
    inverse[order] = np.arange(order.size)
    return TransportPlan(
        entries=sorted_plan.entries[inverse, :],
        row_marginal=source.weights,
        col_marginal=target.weights,
    )


def transport_cost(plan: TransportPlan, cost: CostMatrix | np.ndarray) -> float:
    """Total cost <P, C> of a plan under a cost matrix."""
    C = cost.entries if isinstance(cost, CostMatrix) else np.asarray(cost, float)
    if C.shape != plan.shape:
        raise ValueError(f"cost shape {C.shape} does not match plan {plan.shape}")
    return float(np.sum(plan.entries * C))


def k_rank(a, x, b, y, h: CostSpec | None = None) -> np.ndarray:
    """Generalized (Kantorovich) ranks: ``n * (P @ cumsum(b)) / a``.

    Each entry is a mass-weighted mixture of the target cumulative
    weights, scaled into [0, n].  For uniform weights with m = n and
    distinct values this reproduces ``hard_rank`` exactly.
    """
    plan = solve_exact(a, x, b, y, h)
    bbar = np.cumsum(plan.col_marginal)
    n = plan.row_marginal.size
    return n * (plan.entries @ bbar) / plan.row_marginal


def k_sort(a, x, b, y, h: CostSpec | None = None) -> np.ndarray:
    """Generalized sorted values: ``(P.T @ x) / b``, nondecreasing.

    Entry j is the barycenter of the source values shipped onto target
    j; for uniform weights with m = n this is the sorted vector.
    """
    plan = solve_exact(a, x, b, y, h)
    xv = np.asarray(x, dtype=np.float64)
    return (plan.entries.T @ xv) / plan.col_marginal
