"""Per-labeler losses, gradient-matching penalties, and their weighted aggregation.

For a row ``x`` on which ``m(x)`` labelers vote, the objective is::

    sum_{i votes on x} u_i * [ CE(h(x), vote_i) + alpha * pen_i(x) ]
    u_i = weight_i / m(x)
    pen_i(x) = sum_{(j, y) read by labeler i} f( max(c * g_i(j, y) - dh_y/dx_j, 0) )

with ``f(r) = r**2`` (square), ``r`` (linear) or ``exp(r) - 1`` (exponential),
``g_i`` the smoothed labeler gradient and ``dh/dx`` the model's input gradient
averaged over Bernoulli samples around ``x``.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import ABSTAIN
from .labelers import GradientTable, SmoothedLabelerGradient, VoteMatrix
from .labelmodels import AccuracyEstimate
from .nnet import MLP, NumericalError

log = logging.getLogger(__name__)

PROB_FLOOR = 1e-12
PENALTIES = ("none", "square", "linear", "exponential")
WEIGHTINGS = ("uniform", "coverage", "accuracy")


@dataclass(frozen=True)
class LossConfig:
    penalty: str = "square"
    alpha: float = 0.01
    c: float = 1.0
    smoothing_samples: int = 1
    smoothing_epsilon: float = 0.0
    top_k: int | None = None
    weighting: str = "uniform"
    loss: str = "cross_entropy"  # "square" is for binary sanity checks only

    def __post_init__(self):
        if self.penalty not in PENALTIES:
            raise ValueError(f"unknown penalty {self.penalty!r}")
        if self.weighting not in WEIGHTINGS:
            raise ValueError(f"unknown weighting {self.weighting!r}")
        if self.loss not in ("cross_entropy", "square"):
            raise ValueError(f"unknown loss {self.loss!r}")
        if self.alpha < 0 or self.c < 0:
            raise ValueError("alpha and c must be non-negative")
        if self.smoothing_samples < 1 or not 0.0 <= self.smoothing_epsilon < 1.0:
            raise ValueError("need at least one smoothing sample and epsilon in [0, 1)")
        if self.top_k is not None and self.top_k < 1:
            raise ValueError("top_k must be positive")

    def to_dict(self) -> dict:
        return {"penalty": self.penalty, "alpha": self.alpha, "c": self.c,
                "smoothingSamples": self.smoothing_samples, "smoothingEpsilon": self.smoothing_epsilon,
                "topK": self.top_k, "weighting": self.weighting, "loss": self.loss}

    @classmethod
    def from_dict(cls, obj: dict) -> "LossConfig":
        keys = {"penalty": "penalty", "alpha": "alpha", "c": "c", "smoothingSamples": "smoothing_samples",
                "smoothingEpsilon": "smoothing_epsilon", "topK": "top_k", "weighting": "weighting", "loss": "loss"}
        return cls(**{keys[k]: v for k, v in obj.items() if k in keys})


@dataclass(frozen=True)
class WeightScheme:
    weights: np.ndarray
    kind: str


@dataclass(frozen=True)
class PerExampleLoss:
    value: float
    classification: float
    penalty: float
    labelers: tuple[int, ...] = field(default=())


# ---------------------------------------------------------------------- primitives

def simple_loss(h, vote: int) -> tuple[float, np.ndarray]:
    """Cross-entropy of ``h`` against one labeler's vote, and its gradient in ``h``."""
    if vote == ABSTAIN:
        raise ValueError("abstaining votes carry no loss; filter them before calling")
    h = np.asarray(h, dtype=np.float64)
    grad = np.zeros_like(h)
    p = h[vote]
    if p > PROB_FLOOR:
        grad[vote] = -1.0 / p
    return float(-np.log(max(p, PROB_FLOOR))), grad


def penalty_terms(kind: str, r: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """``f(r)`` and ``f'(r)`` for non-negative hinge residuals ``r``."""
    if kind == "square":
        return r * r, 2.0 * r
    if kind == "linear":
        return r.copy(), (r > 0).astype(np.float64)
    if kind == "exponential":
        return np.expm1(r), np.where(r > 0, np.exp(r), 0.0)
    raise ValueError(f"no penalty terms for kind {kind!r}")


def hinge_penalty(model_grad: dict, labeler_grad: SmoothedLabelerGradient, c: float, kind: str):
    """Penalty for one labeler on one example; returns ``(value, residuals)`` keyed by ``(j, y)``."""
    keys = sorted(labeler_grad.entries)
    if not keys:
        return 0.0, {}
    g_lab = np.array([labeler_grad.entries[k] for k in keys])
    g_mod = np.array([model_grad[k] for k in keys])
    r = np.maximum(c * g_lab - g_mod, 0.0)
    f, _ = penalty_terms(kind, r)
    return float(np.sum(f)), dict(zip(keys, r.tolist()))


def bernoulli_params(X_bin: np.ndarray, epsilon: float) -> np.ndarray:
    return (1.0 - epsilon) * X_bin + 0.5 * epsilon


def _smoothing_points(X_bin: np.ndarray, cfg: LossConfig, rng: np.random.Generator | None):
    """Sample points ``(B * t, d)`` and their averaging weight; ``epsilon = 0`` means ``z = x``."""
    if cfg.smoothing_epsilon == 0.0:
        return X_bin, 1.0, 1
    if rng is None:
        raise ValueError("Bernoulli smoothing needs a random generator")
    t = cfg.smoothing_samples
    phi = bernoulli_params(X_bin, cfg.smoothing_epsilon)
    Z = (rng.random((X_bin.shape[0], t, X_bin.shape[1])) < phi[:, None, :]).astype(np.float64)
    return Z.reshape(-1, X_bin.shape[1]), 1.0 / t, t


def smoothed_jacobian_at(model: MLP, X_bin: np.ndarray, cfg: LossConfig, rng=None):
    """Monte Carlo estimate of ``d h~ / d phi`` for every row; returns ``(J, points, scale, t)``."""
    Z, scale, t = _smoothing_points(X_bin, cfg, rng)
    J = model.input_jacobian(Z)
    if t > 1:
        J = J.reshape(X_bin.shape[0], t, *J.shape[1:]).mean(axis=1)
    return J, Z, scale, t


def model_smoothed_grad(model: MLP, x, keys: Sequence[tuple[int, int]], cfg: LossConfig,
                        rng: np.random.Generator | None = None) -> dict:
    """Smoothed model input gradient at labeler-used ``(feature, class)`` pairs for one example."""
    x_bin = (np.atleast_2d(np.asarray(x, dtype=np.float64)) > 0).astype(np.float64)
    J = smoothed_jacobian_at(model, x_bin, cfg, rng)[0][0]
    return {(j, y): float(J[y, j]) for j, y in keys}


# ---------------------------------------------------------------------- weights

def build_weight_scheme(kind: str, vm: VoteMatrix, acc: AccuracyEstimate | None = None) -> WeightScheme:
    if kind == "uniform":
        return WeightScheme(np.ones(vm.m), kind)
    cover = vm.coverage_counts().astype(np.float64)
    silent = cover == 0
    for i in np.flatnonzero(silent):
        log.warning("labeler %r never votes; dropping it from the objective", vm.labeler_names[i])
    inv = np.where(silent, 0.0, 1.0 / np.maximum(cover, 1.0))
    if kind == "coverage":
        return WeightScheme(inv, kind)
    if kind == "accuracy":
        if acc is None:
            raise ValueError("accuracy weighting needs accuracy estimates")
        w = np.asarray(acc.accuracy, dtype=np.float64)
        return WeightScheme(w / w.sum() * inv, kind)
    raise ValueError(f"unknown weighting {kind!r}")


def example_weights(votes: np.ndarray, weights: np.ndarray) -> np.ndarray:
    """``u[b, i] = weight_i / m(x_b)`` on voting pairs, zero elsewhere (and on all-abstain rows)."""
    on = votes != ABSTAIN
    m_x = on.sum(axis=1, keepdims=True)
    return np.where(on, weights[None, :] / np.maximum(m_x, 1), 0.0)


def vote_targets(votes: np.ndarray, u: np.ndarray, num_classes: int) -> np.ndarray:
    T = np.zeros((votes.shape[0], num_classes))
    for c in range(num_classes):
        T[:, c] = np.sum(np.where(votes == c, u, 0.0), axis=1)
    return T


# ---------------------------------------------------------------------- objectives

@dataclass
class BatchLoss:
    value: float
    classification: float
    penalty: float
    per_example: np.ndarray
    per_example_classification: np.ndarray
    per_example_penalty: np.ndarray


def target_loss(P: np.ndarray, T: np.ndarray, loss: str = "cross_entropy"):
    """Per-row loss against (possibly unnormalised) targets and its gradient in ``P``.

    For cross-entropy, row ``b`` costs ``sum_c T[b, c] * -log P[b, c]``. The
    binary square loss costs ``sum_i u_i (h_1 - v_i)^2``, which in terms of
    ``U = sum_c T[b, c]`` and ``T1 = T[b, 1]`` is ``U h_1^2 - 2 h_1 T1 + T1``
    when the targets are votes, and ``(h_1 - T1)^2`` for a soft label.
    """
    if loss == "cross_entropy":
        values = -np.sum(T * np.log(np.maximum(P, PROB_FLOOR)), axis=1)
        grad = np.where(P > PROB_FLOOR, -T / np.maximum(P, PROB_FLOOR), 0.0)
        return values, grad
    if P.shape[1] != 2:
        raise ValueError("the square loss is only defined here for binary tasks")
    h1 = P[:, 1]
    U = T.sum(axis=1)
    values = U * h1 * h1 - 2.0 * h1 * T[:, 1] + T[:, 1]
    grad = np.zeros_like(P)
    grad[:, 1] = 2.0 * U * h1 - 2.0 * T[:, 1]
    return values, grad


def soft_label_square_loss(P: np.ndarray, t1: np.ndarray):
    h1 = P[:, 1]
    grad = np.zeros_like(P)
    grad[:, 1] = 2.0 * (h1 - t1)
    return (h1 - t1) ** 2, grad


def pseudolabel_objective(model: MLP, X: np.ndarray, targets: np.ndarray, loss: str = "cross_entropy",
                          dropout_rng=None, train: bool = True):
    """Mean loss of ``model`` against per-row pseudolabel distributions, and its parameter gradient."""
    P, cache = model.forward(X, train=train, rng=dropout_rng)
    if loss == "square":
        values, gP = soft_label_square_loss(P, targets[:, 1])
    else:
        values, gP = target_loss(P, targets, loss)
    B = X.shape[0]
    grads = model.param_grad(cache, gP / B)
    value = float(np.sum(values) / B)
    if not np.isfinite(value):
        raise NumericalError(f"non-finite pseudolabel loss at row {int(np.flatnonzero(~np.isfinite(values))[0])}")
    zeros = np.zeros(B)
    return BatchLoss(value, value, 0.0, values, values, zeros), grads


def batch_objective(model: MLP, X: np.ndarray, votes: np.ndarray, table: GradientTable, cfg: LossConfig,
                    weights: np.ndarray, dropout_rng=None, smoothing_rng=None, train: bool = True,
                    X_bin: np.ndarray | None = None):
    """Mean per-example objective over a batch, and its exact parameter gradient.

    ``table`` must be indexed by batch position (see :meth:`GradientTable.select_rows`).
    The classification term sees dropout when ``train``; the penalty always
    uses the deterministic network.
    """
    B = X.shape[0]
    k = model.num_classes
    u = example_weights(votes, np.asarray(weights, dtype=np.float64))
    T = vote_targets(votes, u, k)
    P, cache = model.forward(X, train=train, rng=dropout_rng)
    cls_values, gP = target_loss(P, T, cfg.loss)
    grads = model.param_grad(cache, gP / B)

    pen_values = np.zeros(B)
    if cfg.penalty != "none" and len(table):
        if X_bin is None:
            X_bin = (X > 0).astype(np.float64)
        J, Z, scale, t = smoothed_jacobian_at(model, X_bin, cfg, smoothing_rng)
        g_model = J[table.row, table.cls, table.feature]
        r = np.maximum(cfg.c * table.value - g_model, 0.0)
        f, df = penalty_terms(cfg.penalty, r)
        omega = u[table.row, table.labeler]
        pen_values = np.bincount(table.row, weights=omega * f, minlength=B)
        seeds = np.zeros((B, k, X.shape[1]))
        np.add.at(seeds, (table.row, table.cls, table.feature), -cfg.alpha * omega * df / B)
        if t > 1:
            seeds = np.repeat(seeds, t, axis=0)
        seeds *= scale
        pen_grads = model.penalty_param_grad(Z, seeds)
        grads = [g + pg for g, pg in zip(grads, pen_grads)]

    values = cls_values + cfg.alpha * pen_values
    if not np.all(np.isfinite(values)):
        b = int(np.flatnonzero(~np.isfinite(values))[0])
        voting = np.flatnonzero(votes[b] != ABSTAIN)
        raise NumericalError(f"non-finite loss on batch row {b} (labelers {voting.tolist()})")
    return BatchLoss(float(np.sum(values) / B), float(np.sum(cls_values) / B), float(np.sum(pen_values) / B),
                     values, cls_values, pen_values), grads


def table_from_gradients(gradients: Sequence[SmoothedLabelerGradient], vote_row: np.ndarray) -> GradientTable:
    rows, labs, feats, clss, vals = [], [], [], [], []
    for g in gradients:
        if g is None or vote_row[g.labeler_index] == ABSTAIN:
            continue
        for (j, y), v in sorted(g.entries.items()):
            rows.append(0)
            labs.append(g.labeler_index)
            feats.append(j)
            clss.append(y)
            vals.append(v)
    as_int = lambda a: np.asarray(a, dtype=np.int64)
    return GradientTable(as_int(rows), as_int(labs), as_int(feats), as_int(clss), np.asarray(vals, dtype=np.float64))


def example_objective(model: MLP, x, vote_row, gradients: Sequence[SmoothedLabelerGradient], cfg: LossConfig,
                      weights: WeightScheme | np.ndarray, dropout_rng=None, smoothing_rng=None):
    """Objective of a single example; returns ``(PerExampleLoss, parameter gradient)``."""
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    vote_row = np.atleast_2d(np.asarray(vote_row, dtype=np.int64))
    w = weights.weights if isinstance(weights, WeightScheme) else np.asarray(weights, dtype=np.float64)
    table = table_from_gradients(gradients, vote_row[0])
    res, grads = batch_objective(model, x, vote_row, table, cfg, w, dropout_rng=dropout_rng,
                                 smoothing_rng=smoothing_rng, train=dropout_rng is not None)
    voting = tuple(int(i) for i in np.flatnonzero(vote_row[0] != ABSTAIN))
    return PerExampleLoss(res.value, res.classification, res.penalty, voting), grads
