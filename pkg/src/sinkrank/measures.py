"""Weighted point measures on the real line, ground costs, input squashing.

Everything downstream consumes a pair of discrete measures: the data
measure (weights ``a`` on support ``x``) and a sorted target measure
(weights ``b`` on increasing support ``y``).  The ground cost between
them is ``h(y_j - x_i)`` for a convex power cost ``h(u) = |u|**p``.

Inputs are normalized before entering a solver by standardizing
(zero mean, unit scale) and mapping through an increasing squashing
function into [0, 1]; this makes a fixed regularization strength
meaningful regardless of the range of the raw values.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

__all__ = [
    "DiscreteMeasure",
    "TargetDescriptor",
    "CostSpec",
    "CostMatrix",
    "build_cost",
    "squash",
    "regular_grid_target",
    "uniform_weights",
    "SQUASH_FUNCTIONS",
]

# Weight vectors must sum to one within this tolerance after at most one
# renormalization pass; a deviation of up to _RENORM_SLACK is silently
# renormalized, anything farther off is rejected as a caller bug.
_WEIGHT_TOL = 1e-12
_RENORM_SLACK = 1e-8

# Below this l2 deviation from the mean a vector is treated as constant
# and squashed to g(0) instead of dividing by ~zero.
_CONSTANT_TOL = 1e-12


def _as_vector(values, name):
    arr = np.asarray(values, dtype=np.float64)
    if arr.ndim != 1 or arr.size == 0:
        raise ValueError(f"{name} must be a nonempty 1-d array, got shape {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise ValueError(f"{name} contains non-finite entries")
    return arr


def _validated_weights(weights, name="weights"):
    w = _as_vector(weights, name)
    if np.any(w <= 0):
        raise ValueError(f"{name} must be strictly positive")
    total = w.sum()
    if abs(total - 1.0) > _RENORM_SLACK:
        raise ValueError(f"{name} sum to {total!r}, expected 1 within {_RENORM_SLACK}")
    if abs(total - 1.0) > _WEIGHT_TOL:
        w = w / total
    return w


def _frozen(arr):
    arr = np.ascontiguousarray(arr, dtype=np.float64)
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True)
class DiscreteMeasure:
    """Probability weights on a support of real values.

    ``weights`` are strictly positive and sum to one (renormalized once
    when within 1e-8 of one); ``support`` is any real vector of the same
    length.  Instances are immutable and safe to share across threads.
    """

    weights: np.ndarray
    support: np.ndarray

    def __post_init__(self):
        w = _validated_weights(self.weights)
        s = _as_vector(self.support, "support")
        if w.size != s.size:
            raise ValueError(
                f"weights and support lengths differ: {w.size} != {s.size}"
            )
        object.__setattr__(self, "weights", _frozen(w))
        object.__setattr__(self, "support", _frozen(s))

    def __len__(self):
        return self.support.size


@dataclass(frozen=True)
class TargetDescriptor:
    """A sorted target measure: weights on a strictly increasing support."""

    weights: np.ndarray
    support: np.ndarray

    def __post_init__(self):
        w = _validated_weights(self.weights)
        s = _as_vector(self.support, "support")
        if w.size != s.size:
            raise ValueError(
                f"weights and support lengths differ: {w.size} != {s.size}"
            )
        if s.size > 1 and not np.all(np.diff(s) > 0):
            raise ValueError("target support must be strictly increasing")
        object.__setattr__(self, "weights", _frozen(w))
        object.__setattr__(self, "support", _frozen(s))

    @property
    def cumulative_weights(self):
        """Prefix sums of the weights; nondecreasing, final entry 1."""
        return np.cumsum(self.weights)

    def __len__(self):
        return self.support.size


@dataclass(frozen=True)
class CostSpec:
    """Translation-invariant ground cost ``h(u) = |u|**p`` with p >= 1."""

    exponent: float = 2.0
    kind: str = field(default="absolute-power", repr=False)

    def __post_init__(self):
        if self.kind != "absolute-power":
            raise ValueError(f"unknown cost kind {self.kind!r}")
        if not np.isfinite(self.exponent) or self.exponent < 1.0:
            raise ValueError(f"cost exponent must be >= 1, got {self.exponent!r}")

    def h(self, u):
        return np.abs(u) ** self.exponent

    def h_prime(self, u):
        """Derivative of h; the subgradient 0 is used at u == 0 for p = 1."""
        p = self.exponent
        if p == 1.0:
            return np.sign(u)
        return p * np.abs(u) ** (p - 1.0) * np.sign(u)


@dataclass(frozen=True)
class CostMatrix:
    """Dense cost matrix ``entries[i, j] == h(col_support[j] - row_support[i])``."""

    entries: np.ndarray
    row_support: np.ndarray
    col_support: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "entries", _frozen(self.entries))
        object.__setattr__(self, "row_support", _frozen(self.row_support))
        object.__setattr__(self, "col_support", _frozen(self.col_support))

    @property
    def shape(self):
        return self.entries.shape


def build_cost(x, y, h: CostSpec | None = None) -> CostMatrix:
    """Ground-cost matrix between values ``x`` and sorted targets ``y``.

    Entry (i, j) is ``h(y[j] - x[i])``; ``y`` must be strictly increasing.
    """
    h = h or CostSpec()
    xv = _as_vector(x, "x")
    yv = _as_vector(y, "y")
    if yv.size > 1 and not np.all(np.diff(yv) > 0):
        raise ValueError("y must be strictly increasing")
    entries = h.h(yv[None, :] - xv[:, None])
    return CostMatrix(entries=entries, row_support=xv, col_support=yv)


def _logistic(z):
    return 1.0 / (1.0 + np.exp(-z))


def _arctan01(z):
    # arctan rescaled from (-pi/2, pi/2) into (0, 1)
    return np.arctan(z) / np.pi + 0.5


SQUASH_FUNCTIONS = {"logistic": _logistic, "arctan": _arctan01}


def squash(x, g: str = "logistic") -> np.ndarray:
    """Standardize then squash a vector into [0, 1].

    Computes ``g((x - mean) / s)`` where ``s = ||x - mean||_2 / sqrt(n)``
    is the population standard deviation.  Constant vectors (s below
    1e-12) map to ``g(0)`` everywhere rather than dividing by zero.
    The output preserves strict ordering and is invariant under
    positive affine maps of the input.
    """
    try:
        fn = SQUASH_FUNCTIONS[g]
    except KeyError:
        raise ValueError(
            f"unknown squashing function {g!r}; expected one of "
            f"{sorted(SQUASH_FUNCTIONS)}"
        ) from None
    xv = _as_vector(x, "x")
    centered = xv - xv.mean()
    norm = np.linalg.norm(centered)
    if norm < _CONSTANT_TOL:
        return np.full_like(xv, fn(0.0))
    return fn(centered / (norm / np.sqrt(xv.size)))


def uniform_weights(n: int) -> np.ndarray:
    if n < 1:
        raise ValueError(f"need at least one point, got n={n}")
    return np.full(n, 1.0 / n)


def regular_grid_target(m: int) -> TargetDescriptor:
    """Uniform target on the regular grid (0, ..., m-1)/(m-1) in [0, 1]."""
    if m < 1:
        raise ValueError(f"need at least one target point, got m={m}")
    support = np.array([0.5]) if m == 1 else np.arange(m) / (m - 1)
    return TargetDescriptor(weights=uniform_weights(m), support=support)
