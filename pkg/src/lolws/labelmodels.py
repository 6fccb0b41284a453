"""Pseudolabel baselines and unsupervised labeler-accuracy estimates."""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from itertools import combinations

import numpy as np

from . import ABSTAIN
from . import rng as rng_streams
from .labelers import VoteMatrix

ACC_FLOOR = 0.5 + 1e-3
ACC_CEIL = 1.0 - 1e-3
_MIN_DENOMINATOR = 1e-6


class UnsupportedTaskError(ValueError):
    """The label model is only defined for binary tasks."""


def majority_vote_hard(vm: VoteMatrix, seed: int = 0) -> np.ndarray:
    """Most frequent vote per row. Ties, and rows where everyone abstains, are broken uniformly at random."""
    counts = vm.class_counts()
    best = counts.max(axis=1, keepdims=True)
    keys = rng_streams.stream(seed, "tiebreak").random(counts.shape)
    return np.argmax(np.where(counts == best, keys, -1.0), axis=1)


def majority_vote_soft(vm: VoteMatrix) -> np.ndarray:
    counts = vm.class_counts().astype(np.float64)
    total = counts.sum(axis=1, keepdims=True)
    uniform = np.full_like(counts, 1.0 / vm.num_classes)
    return np.where(total > 0, counts / np.maximum(total, 1.0), uniform)


@dataclass(frozen=True)
class AccuracyEstimate:
    accuracy: np.ndarray  # clamped, used as weights
    method: str
    raw: np.ndarray | None = field(default=None, repr=False)
    labeler_names: tuple[str, ...] = ()

    def to_json(self) -> str:
        names = self.labeler_names or tuple(str(i) for i in range(len(self.accuracy)))
        return json.dumps({n: float(a) for n, a in zip(names, self.accuracy)}, indent=1)

    @classmethod
    def from_json(cls, text: str, labeler_names=None) -> "AccuracyEstimate":
        obj = json.loads(text)
        names = tuple(labeler_names) if labeler_names is not None else tuple(obj)
        acc = np.array([obj[n] for n in names], dtype=np.float64)
        return cls(acc, "file", acc.copy(), names)


def _signed_votes(vm: VoteMatrix) -> np.ndarray:
    if vm.num_classes != 2:
        raise UnsupportedTaskError("the triplet method is defined for binary classification tasks only")
    v = vm.votes
    return np.where(v == ABSTAIN, 0.0, np.where(v == 1, 1.0, -1.0))


def pairwise_agreement(vm: VoteMatrix, min_overlap: int = 10, strict: bool = True):
    """``E[s_i s_j]`` over jointly non-abstaining rows, with votes mapped to +-1.

    Returns ``(moments, valid)``. With ``strict`` a pair with fewer than
    ``min_overlap`` shared rows raises; otherwise it is marked invalid.
    """
    s = _signed_votes(vm)
    on = (s != 0).astype(np.float64)
    m = vm.m
    moments = np.zeros((m, m))
    valid = np.zeros((m, m), dtype=bool)
    for i, j in combinations(range(m), 2):
        joint = on[:, i] * on[:, j]
        cnt = int(joint.sum())
        if cnt < min_overlap:
            if strict:
                raise ValueError(f"labelers {vm.labeler_names[i]!r} and {vm.labeler_names[j]!r} "
                                 f"overlap on {cnt} rows (< {min_overlap})")
            continue
        moments[i, j] = moments[j, i] = float(np.dot(s[:, i], s[:, j])) / cnt
        valid[i, j] = valid[j, i] = True
    return moments, valid


def triplet_accuracies(vm: VoteMatrix, aggregation: str = "mean", min_overlap: int = 10,
                       strict: bool = True) -> AccuracyEstimate:
    """Closed-form accuracy estimates from labeler triplets.

    Under conditional independence, for every triplet ``(i, j, l)``::

        |E[s_i Y]| = sqrt(|E[s_i s_j] E[s_i s_l] / E[s_j s_l]|)

    Per-labeler estimates are combined over all triplets by mean or median
    and mapped to accuracy ``(1 + |E[s_i Y]|) / 2``. Taking the absolute
    value assumes labelers are better than chance on average.
    """
    if aggregation not in ("mean", "median"):
        raise ValueError(f"aggregation must be 'mean' or 'median', got {aggregation!r}")
    if vm.m < 3:
        raise ValueError("the triplet method needs at least three labelers")
    M, valid = pairwise_agreement(vm, min_overlap, strict)
    raw = np.empty(vm.m)
    for i in range(vm.m):
        others = [j for j in range(vm.m) if j != i]
        ests = []
        for j, l in combinations(others, 2):
            if not (valid[i, j] and valid[i, l] and valid[j, l]):
                continue
            if abs(M[j, l]) < _MIN_DENOMINATOR:
                continue
            ests.append(math.sqrt(abs(M[i, j] * M[i, l] / M[j, l])))
        if not ests:
            raise ValueError(f"no usable triplet for labeler {vm.labeler_names[i]!r}")
        # fsum is exactly rounded, so the mean does not depend on labeler order.
        a = math.fsum(ests) / len(ests) if aggregation == "mean" else float(np.median(ests))
        raw[i] = (1.0 + a) / 2.0
    acc = np.clip(raw, ACC_FLOOR, ACC_CEIL)
    return AccuracyEstimate(acc, f"triplet-{aggregation}", raw, vm.labeler_names)


def oracle_accuracies(vm: VoteMatrix, gold: np.ndarray) -> AccuracyEstimate:
    """Empirical accuracy on non-abstaining rows, from gold labels (diagnostics only)."""
    on = vm.votes != ABSTAIN
    hits = (vm.votes == np.asarray(gold)[:, None]) & on
    raw = hits.sum(axis=0) / np.maximum(on.sum(axis=0), 1)
    return AccuracyEstimate(raw.astype(np.float64), "oracle", raw.astype(np.float64), vm.labeler_names)


def triplet_soft_labels(vm: VoteMatrix, acc: AccuracyEstimate) -> np.ndarray:
    """Naive-Bayes posterior over {0, 1} with a uniform prior."""
    s = _signed_votes(vm)
    w = np.asarray(acc.accuracy, dtype=np.float64)
    if w.shape != (vm.m,):
        raise ValueError("accuracy vector does not match the number of labelers")
    # log-odds for class 1: each vote adds +-log(w / (1 - w)).
    with np.errstate(divide="ignore"):
        llr = np.log(w) - np.log1p(-w)
    score = s @ llr
    p1 = 0.5 * (1.0 + np.tanh(0.5 * score))
    return np.column_stack([1.0 - p1, p1])


def accuracy_weights(acc: AccuracyEstimate) -> np.ndarray:
    w = np.asarray(acc.accuracy, dtype=np.float64)
    if w.size < 1:
        raise ValueError("need at least one labeler")
    return w / w.sum()
