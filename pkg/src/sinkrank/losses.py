"""Training losses built on the smoothed operators, plus a small trainer.

* ``soft_topk_loss``: hinge on the smoothed rank of the true label's
  score, a differentiable stand-in for the 0/1 and top-k errors.
* ``soft_quantile``: transport the values onto a three-point target
  whose small middle ("filler") weight captures the values sitting at
  the desired quantile; the middle barycenter is the smooth quantile.
* ``train_least_quantile``: minibatch descent on the soft quantile of
  absolute residuals, against a baseline that differentiates through
  the single sample at the empirical quantile.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .gradients import forward_with_tape, vjp_unrolled
from .measures import CostSpec
from .sinkhorn import SinkhornConfig, s_rank, solve_rank_sort

__all__ = [
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


@dataclass(frozen=True)
class TopKLossSpec:
    """Settings for the smoothed top-k classification loss."""

    num_labels: int
    k: int = 1
    epsilon: float = 1e-3
    eta: float = 1e-3
    h: CostSpec = field(default_factory=CostSpec)
    max_iters: int = 5000

    def __post_init__(self):
        if self.num_labels < 1:
            raise ValueError(f"need at least one label, got {self.num_labels}")
        if not 1 <= self.k <= self.num_labels:
            raise ValueError(
                f"k must lie in [1, {self.num_labels}], got {self.k}"
            )


@dataclass(frozen=True)
class QuantileSpec:
    """Quantile level, filler mass and regularization for soft quantiles.

    ``t`` may be left unset; it then defaults to ``1/n`` at the point of
    use.  When given it must satisfy ``0 < t < min(2*tau, 2*(1-tau))``
    so that all three target weights stay positive.
    """

    tau: float
    t: float | None = None
    epsilon: float = 1e-2

    def __post_init__(self):
        if not 0.0 < self.tau < 1.0:
            raise ValueError(f"tau must lie in (0, 1), got {self.tau!r}")
        if self.t is not None:
            self._check_filler(self.t)
        if not (np.isfinite(self.epsilon) and self.epsilon > 0):
            raise ValueError(f"epsilon must be positive, got {self.epsilon!r}")

    def _check_filler(self, t):
        bound = min(2.0 * self.tau, 2.0 * (1.0 - self.tau))
        if not 0.0 < t < bound:
            raise ValueError(
                f"filler weight t={t!r} outside (0, {bound}) for tau={self.tau}"
            )

    def filler_for(self, n: int) -> float:
        t = 1.0 / n if self.t is None else self.t
        self._check_filler(t)
        return t


def quantile_target(tau: float, t: float):
    """Three-point target: masses (tau - t/2, t, 1 - tau - t/2) at (0, 1/2, 1)."""
    b = np.array([tau - t / 2.0, t, 1.0 - tau - t / 2.0])
    y = np.array([0.0, 0.5, 1.0])
    return b, y


def hard_quantile(values, tau: float) -> float:
    """Lower empirical quantile: sorted value at index ceil(tau * n)."""
    v = np.sort(np.asarray(values, dtype=np.float64))
    if v.size == 0:
        raise ValueError("need at least one value")
    idx = max(1, math.ceil(tau * v.size))
    return float(v[idx - 1])


def soft_topk_loss(scores, label: int, spec: TopKLossSpec) -> float:
    """Hinge on the smoothed rank of the labelled score.

    Zero when the label's smoothed rank is within the top k; grows
    linearly (up to L - k) as the label sinks in the ranking.  The
    label is 1-based.
    """
    scores = np.asarray(scores, dtype=np.float64)
    L = spec.num_labels
    if scores.shape != (L,):
        raise ValueError(f"scores shape {scores.shape} != ({L},)")
    if not 1 <= label <= L:
        raise ValueError(f"label {label} outside [1, {L}]")
    cfg = SinkhornConfig(epsilon=spec.epsilon, eta=spec.eta, max_iters=spec.max_iters)
    ranks = s_rank(scores, h=spec.h, cfg=cfg)
    return float(max(0.0, L - ranks[label - 1] - spec.k + 1.0))


def _solve_quantile(x, spec: QuantileSpec, max_iters=20000):
    x = np.asarray(x, dtype=np.float64)
    if x.size < 2:
        raise ValueError(f"need at least two values, got {x.size}")
    t = spec.filler_for(x.size)
    b, y = quantile_target(spec.tau, t)
    # the filler column must be resolved to a within-1% marginal error
    # or its barycenter is meaningless; scale the tolerance with t
    eta = min(1e-3, t / 100.0)
    cfg = SinkhornConfig(epsilon=spec.epsilon, eta=eta, max_iters=max_iters)
    result, state = solve_rank_sort(x, b=b, y=y, cfg=cfg)
    return result, state


def soft_quantile(x, spec: QuantileSpec) -> float:
    """Differentiable tau-quantile: middle barycenter of the transport
    onto the filler target, in the units of ``x``."""
    result, _ = _solve_quantile(x, spec)
    return float(result.s_sorts[1])


def least_quantile_objective(residuals, spec: QuantileSpec) -> float:
    """Soft quantile of a nonnegative residual vector.

    The filler weight defaults to one over the batch size.
    """
    res = np.asarray(residuals, dtype=np.float64)
    if np.any(res < 0):
        raise ValueError("residuals must be nonnegative")
    return soft_quantile(res, spec)


class LinearModel:
    """Affine predictor ``f(w) = theta_0 + <theta_1:, w>``."""

    def __init__(self, num_features: int):
        self.params = np.zeros(num_features + 1)

    def predict(self, X):
        return self.params[0] + X @ self.params[1:]

    def param_grad(self, X, upstream):
        """Gradient of <upstream, predictions> w.r.t. the parameters."""
        return np.concatenate([[upstream.sum()], X.T @ upstream])


class TwoLayerModel:
    """One hidden ReLU layer (width 64 by default)."""

    def __init__(self, num_features: int, hidden: int = 64, seed: int = 0):
        rng = np.random.default_rng(seed)
        scale = np.sqrt(2.0 / max(1, num_features))
        self._d = num_features
        self._h = hidden
        W1 = rng.normal(0.0, scale, (hidden, num_features))
        W2 = rng.normal(0.0, np.sqrt(1.0 / hidden), hidden)
        self.params = np.concatenate([W1.ravel(), np.zeros(hidden), W2, [0.0]])

    def _unpack(self):
        d, hdim = self._d, self._h
        W1 = self.params[: hdim * d].reshape(hdim, d)
        b1 = self.params[hdim * d : hdim * d + hdim]
        W2 = self.params[hdim * d + hdim : hdim * d + 2 * hdim]
        b2 = self.params[-1]
        return W1, b1, W2, b2

    def predict(self, X):
        W1, b1, W2, b2 = self._unpack()
        hidden = np.maximum(X @ W1.T + b1, 0.0)
        return hidden @ W2 + b2

    def param_grad(self, X, upstream):
        W1, b1, W2, _ = self._unpack()
        pre = X @ W1.T + b1
        act = np.maximum(pre, 0.0)
        mask = (pre > 0).astype(np.float64)
        gW2 = act.T @ upstream
        gb2 = upstream.sum()
        back = (upstream[:, None] * W2[None, :]) * mask
        gW1 = back.T @ X
        gb1 = back.sum(axis=0)
        return np.concatenate([gW1.ravel(), gb1, gW2, [gb2]])


@dataclass(frozen=True)
class TrainConfig:
    """Minibatch descent settings for the least-quantile trainer."""

    epochs: int
    batch_size: int = 512
    step_size: float = 1e-4
    optimizer: str = "adam"  # or "sgd"
    mode: str = "soft"  # or "baseline" (gradient through the quantile sample)
    seed: int = 0
    holdout_fraction: float = 0.25
    max_sweeps: int = 300

    def __post_init__(self):
        if self.epochs < 0:
            raise ValueError(f"epochs must be >= 0, got {self.epochs}")
        if self.optimizer not in ("adam", "sgd"):
            raise ValueError(f"unknown optimizer {self.optimizer!r}")
        if self.mode not in ("soft", "baseline"):
            raise ValueError(f"unknown mode {self.mode!r}")
        if not 0.0 <= self.holdout_fraction < 1.0:
            raise ValueError(
                f"holdout_fraction must lie in [0, 1), got {self.holdout_fraction}"
            )


@dataclass
class TrainingTrace:
    """Per-epoch hard-quantile/mse metrics; row 0 is the initial state."""

    rows: list
    params: np.ndarray
    aborted: bool = False
    message: str = ""

    COLUMNS = ("epoch", "train_quantile", "test_quantile", "mse")


def _soft_quantile_grad(res, spec: QuantileSpec, max_sweeps: int):
    """Soft quantile of a residual vector and its gradient.

    The sweep cap keeps training cheap; the reverse sweep is exact for
    the capped map either way.
    """
    t = spec.filler_for(res.size)
    b, y = quantile_target(spec.tau, t)
    tape = forward_with_tape(
        res, b=b, y=y, epsilon=spec.epsilon,
        eta=min(1e-3, t / 100.0), max_iters=max_sweeps,
    )
    q = float(tape.s_sorts[1])
    seed = np.array([0.0, 1.0, 0.0])
    grad, _ = vjp_unrolled(tape, seed_sorts=seed, coordinates="raw")
    return q, grad


def train_least_quantile(
    features,
    response,
    spec: QuantileSpec,
    cfg: TrainConfig,
    model=None,
) -> TrainingTrace:
    """Minimize the (soft or hard) tau-quantile of absolute residuals.

    Records, after every epoch, the hard tau-quantile of the residuals
    on the train and held-out splits and the held-out MSE.  A non-finite
    loss or parameter aborts the trace with diagnostics instead of
    raising.
    """
    X = np.asarray(features, dtype=np.float64)
    z = np.asarray(response, dtype=np.float64)
    if X.ndim == 1:
        X = X[:, None]
    if X.shape[0] != z.size or X.shape[0] < 4:
        raise ValueError(f"bad dataset shapes: {X.shape} features, {z.size} responses")
    rng = np.random.default_rng(cfg.seed)
    perm = rng.permutation(z.size)
    n_hold = int(round(cfg.holdout_fraction * z.size))
    hold, train = perm[:n_hold], perm[n_hold:]
    Xtr, ztr = X[train], z[train]
    Xho, zho = X[hold], z[hold]
    model = model if model is not None else LinearModel(X.shape[1])

    adam_m = np.zeros_like(model.params)
    adam_v = np.zeros_like(model.params)
    adam_t = 0

    def metrics(epoch):
        res_tr = np.abs(ztr - model.predict(Xtr))
        row = [epoch, hard_quantile(res_tr, spec.tau)]
        if len(zho):
            res_ho = zho - model.predict(Xho)
            row += [hard_quantile(np.abs(res_ho), spec.tau), float(np.mean(res_ho**2))]
        else:
            row += [float("nan"), float("nan")]
        return tuple(row)

    rows = [metrics(0)]
    for epoch in range(1, cfg.epochs + 1):
        order = rng.permutation(len(ztr))
        for start in range(0, len(ztr), cfg.batch_size):
            sel = order[start : start + cfg.batch_size]
            if sel.size < 2:
                continue
            Xb, zb = Xtr[sel], ztr[sel]
            signed = zb - model.predict(Xb)
            if not np.all(np.isfinite(signed)):
                return TrainingTrace(
                    rows=rows,
                    params=model.params,
                    aborted=True,
                    message=f"non-finite residuals at epoch {epoch}",
                )
            absres = np.abs(signed)
            if cfg.mode == "soft":
                try:
                    q, dq = _soft_quantile_grad(absres, spec, cfg.max_sweeps)
                except ValueError as exc:
                    # finite residuals can still overflow inside the
                    # standardization once parameters blow up
                    return TrainingTrace(
                        rows=rows,
                        params=model.params,
                        aborted=True,
                        message=f"loss evaluation failed at epoch {epoch}: {exc}",
                    )
                upstream = -dq * np.sign(signed)
            else:
                j = int(np.argsort(absres)[max(1, math.ceil(spec.tau * sel.size)) - 1])
                q = float(absres[j])
                upstream = np.zeros(sel.size)
                upstream[j] = -np.sign(signed[j])
            grad = model.param_grad(Xb, upstream)
            if not (np.isfinite(q) and np.all(np.isfinite(grad))):
                return TrainingTrace(
                    rows=rows,
                    params=model.params,
                    aborted=True,
                    message=f"non-finite loss or gradient at epoch {epoch}",
                )
            if cfg.optimizer == "adam":
                adam_t += 1
                adam_m = 0.9 * adam_m + 0.1 * grad
                adam_v = 0.999 * adam_v + 0.001 * grad * grad
                mhat = adam_m / (1.0 - 0.9**adam_t)
                vhat = adam_v / (1.0 - 0.999**adam_t)
                model.params = model.params - cfg.step_size * mhat / (
                    np.sqrt(vhat) + 1e-8
                )
            else:
                model.params = model.params - cfg.step_size * grad
            if not np.all(np.isfinite(model.params)):
                return TrainingTrace(
                    rows=rows,
                    params=model.params,
                    aborted=True,
                    message=f"parameters diverged at epoch {epoch}",
                )
        rows.append(metrics(epoch))
    return TrainingTrace(rows=rows, params=model.params)


def load_dataset(path):
    """Read a delimited dataset: one sample per line, features then
    response.  '#' starts a comment; commas or whitespace delimit."""
    features, responses = [], []
    width = None
    with open(path, encoding="utf-8") as fh:
        for lineno, raw in enumerate(fh, start=1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            parts = line.replace(",", " ").split()
            try:
                values = [float(p) for p in parts]
            except ValueError as exc:
                raise ValueError(f"{path}:{lineno}: {exc}") from None
            if len(values) < 2:
                raise ValueError(
                    f"{path}:{lineno}: need at least one feature and a response"
                )
            if width is None:
                width = len(values)
            elif len(values) != width:
                raise ValueError(
                    f"{path}:{lineno}: expected {width} columns, got {len(values)}"
                )
            features.append(values[:-1])
            responses.append(values[-1])
    if not features:
        raise ValueError(f"{path}: no data rows")
    return np.asarray(features), np.asarray(responses)


def write_trace(trace: TrainingTrace, path, mode_label=None):
    """Write a trace as tab-separated text with a one-line header."""
    cols = list(TrainingTrace.COLUMNS)
    if mode_label is not None:
        cols = ["mode"] + cols
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("\t".join(cols) + "\n")
        for row in trace.rows:
            cells = [repr(float(v)) if isinstance(v, float) else str(v) for v in row]
            if mode_label is not None:
                cells = [mode_label] + cells
            fh.write("\t".join(cells) + "\n")


def synthetic_linear_dataset(
    n: int,
    outlier_fraction: float = 0.1,
    seed: int = 0,
    slope: float = 2.0,
    intercept: float = 1.0,
    noise: float = 0.05,
):
    """1-d linear data with a fraction of gross outliers in the response."""
    rng = np.random.default_rng(seed)
    w = rng.uniform(-1.0, 1.0, n)
    z = intercept + slope * w + noise * rng.normal(size=n)
    mask = rng.random(n) < outlier_fraction
    z[mask] += rng.choice([-1.0, 1.0], mask.sum()) * rng.uniform(5.0, 15.0, mask.sum())
    return w[:, None], z
