"""Weak labelers, their vote matrix, and gradients of their Bernoulli-smoothed relaxations.

A keyword rule ``lambda(x) = class if any(x_j > 0 for j in S) else ABSTAIN`` has
the closed-form smoothing over independent ``x_j ~ Ber(phi_j)``::

    P(vote)    = 1 - prod_{j in S} (1 - phi_j)
    P(abstain) =     prod_{j in S} (1 - phi_j)

so ``dP(vote)/dphi_j = prod_{l in S, l != j} (1 - phi_l)``.
"""
from __future__ import annotations

import itertools
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from . import ABSTAIN


KEYWORD = "keywordAny"
LINEAR = "linear"
_MAX_ENUMERATION = 20


@dataclass(frozen=True, eq=False)
class LabelerSpec:
    name: str
    kind: str
    keyword_indices: tuple[int, ...] = ()
    voted_class: int = 0
    weights: np.ndarray | None = field(default=None, repr=False)
    bias: float = 0.0
    class_mapping: tuple[int, int] = (0, 1)  # (class for negative score, class for positive score)
    abstain_band: float = 0.0

    @classmethod
    def keyword(cls, name: str, indices: Sequence[int], voted_class: int) -> "LabelerSpec":
        idx = tuple(sorted({int(j) for j in indices}))
        if not idx:
            raise ValueError(f"labeler {name!r}: keyword set is empty")
        return cls(name, KEYWORD, keyword_indices=idx, voted_class=int(voted_class))

    @classmethod
    def linear(cls, name: str, weights, bias: float = 0.0, class_mapping=(0, 1),
               abstain_band: float = 0.0) -> "LabelerSpec":
        w = np.asarray(weights, dtype=np.float64).copy()
        w.setflags(write=False)
        if abstain_band < 0:
            raise ValueError("abstain_band must be non-negative")
        return cls(name, LINEAR, weights=w, bias=float(bias),
                   class_mapping=(int(class_mapping[0]), int(class_mapping[1])), abstain_band=float(abstain_band))

    def check(self, num_classes: int, feature_dim: int) -> None:
        if self.kind == KEYWORD:
            if not self.keyword_indices or min(self.keyword_indices) < 0 or max(self.keyword_indices) >= feature_dim:
                raise ValueError(f"labeler {self.name!r}: keyword indices outside [0, {feature_dim})")
            if not 0 <= self.voted_class < num_classes:
                raise ValueError(f"labeler {self.name!r}: voted class outside [0, {num_classes})")
        elif self.kind == LINEAR:
            if self.weights is None or self.weights.shape != (feature_dim,):
                raise ValueError(f"labeler {self.name!r}: weight vector must have length {feature_dim}")
            if any(not 0 <= c < num_classes for c in self.class_mapping):
                raise ValueError(f"labeler {self.name!r}: class mapping outside [0, {num_classes})")
        else:
            raise ValueError(f"labeler {self.name!r}: unknown kind {self.kind!r}")

    @property
    def support(self) -> np.ndarray:
        """Feature indices the labeler reads."""
        if self.kind == KEYWORD:
            return np.asarray(self.keyword_indices, dtype=np.int64)
        return np.flatnonzero(self.weights)

    def vote(self, X: np.ndarray) -> np.ndarray:
        X = np.atleast_2d(np.asarray(X, dtype=np.float64))
        if self.kind == KEYWORD:
            fired = (X[:, list(self.keyword_indices)] > 0).any(axis=1)
            return np.where(fired, self.voted_class, ABSTAIN)
        score = X @ self.weights + self.bias
        out = np.where(score > 0, self.class_mapping[1], self.class_mapping[0])
        return np.where(np.abs(score) <= self.abstain_band, ABSTAIN, out)


@dataclass(frozen=True)
class VoteMatrix:
    votes: np.ndarray  # (n, m) ints, ABSTAIN for no vote
    labeler_names: tuple[str, ...]
    num_classes: int

    def __post_init__(self):
        v = np.asarray(self.votes, dtype=np.int64)
        if v.ndim != 2 or v.shape[1] != len(self.labeler_names):
            raise ValueError("vote matrix shape does not match labeler names")
        if ((v != ABSTAIN) & ((v < 0) | (v >= self.num_classes))).any():
            raise ValueError("vote outside class range")
        object.__setattr__(self, "votes", v)

    @property
    def n(self) -> int:
        return self.votes.shape[0]

    @property
    def m(self) -> int:
        return self.votes.shape[1]

    def non_abstain_count(self, i: int) -> int:
        return int((self.votes[i] != ABSTAIN).sum())

    def non_abstain_counts(self) -> np.ndarray:
        return (self.votes != ABSTAIN).sum(axis=1)

    def coverage_counts(self) -> np.ndarray:
        """Per-labeler number of non-abstaining rows."""
        return (self.votes != ABSTAIN).sum(axis=0)

    def class_counts(self) -> np.ndarray:
        """(n, k) matrix of per-class vote counts."""
        counts = np.zeros((self.n, self.num_classes), dtype=np.int64)
        for c in range(self.num_classes):
            counts[:, c] = (self.votes == c).sum(axis=1)
        return counts

    def rows(self, idx) -> "VoteMatrix":
        return VoteMatrix(self.votes[idx], self.labeler_names, self.num_classes)


def apply_labelers(specs: Sequence[LabelerSpec], X, num_classes: int) -> VoteMatrix:
    """Evaluate every labeler on every row of ``X`` (a Dataset or an array)."""
    if hasattr(X, "dense"):
        X = X.dense()
    X = np.atleast_2d(np.asarray(X, dtype=np.float64))
    for s in specs:
        s.check(num_classes, X.shape[1])
    votes = np.empty((X.shape[0], len(specs)), dtype=np.int64)
    for i, s in enumerate(specs):
        votes[:, i] = s.vote(X)
    return VoteMatrix(votes, tuple(s.name for s in specs), num_classes)


def non_abstain_count(vm: VoteMatrix, example_index: int) -> int:
    return vm.non_abstain_count(example_index)


# --------------------------------------------------------------------------- smoothing

def _check_phi(phi) -> np.ndarray:
    phi = np.asarray(phi, dtype=np.float64)
    if not np.all(np.isfinite(phi)) or phi.min(initial=0.0) < 0.0 or phi.max(initial=0.0) > 1.0:
        raise ValueError("Bernoulli parameters must lie in [0, 1]")
    return phi


def _leave_one_out_products(q: np.ndarray) -> np.ndarray:
    """``out[..., j] = prod_{l != j} q[..., l]`` without division."""
    ones = np.ones(q.shape[:-1] + (1,))
    prefix = np.cumprod(np.concatenate([ones, q[..., :-1]], axis=-1), axis=-1)
    suffix = np.cumprod(np.concatenate([ones, q[..., :0:-1]], axis=-1), axis=-1)[..., ::-1]
    return prefix * suffix


def smoothed_value(spec: LabelerSpec, phi, num_classes: int) -> np.ndarray:
    """Expected one-hot vote under ``x ~ Ber(phi)``; last entry is the abstain mass."""
    phi = _check_phi(phi)
    out = np.zeros(num_classes + 1)
    if spec.kind == KEYWORD:
        p_abstain = float(np.prod(1.0 - phi[list(spec.keyword_indices)]))
        out[spec.voted_class] = 1.0 - p_abstain
        out[num_classes] = p_abstain
        return out
    # Linear rules have no closed form; enumerate the support exactly.
    supp = spec.support
    if len(supp) > _MAX_ENUMERATION:
        raise ValueError(f"labeler {spec.name!r}: support too large for exact smoothing")
    base = np.zeros(len(phi))
    for bits in itertools.product((0.0, 1.0), repeat=len(supp)):
        b = np.asarray(bits)
        prob = float(np.prod(np.where(b > 0, phi[supp], 1.0 - phi[supp])))
        if prob == 0.0:
            continue
        base[supp] = b
        v = int(spec.vote(base)[0])
        out[num_classes if v == ABSTAIN else v] += prob
    return out


def smoothed_jacobian(spec: LabelerSpec, phi, num_classes: int) -> np.ndarray:
    """Full ``(k + 1, d)`` derivative of :func:`smoothed_value` for keyword rules, abstain row included."""
    phi = _check_phi(phi)
    if spec.kind != KEYWORD:
        raise ValueError("full smoothed Jacobian is only available for keyword rules")
    S = list(spec.keyword_indices)
    loo = _leave_one_out_products(1.0 - phi[S])
    jac = np.zeros((num_classes + 1, len(phi)))
    jac[spec.voted_class, S] = loo
    jac[num_classes, S] = -loo
    return jac


@dataclass(frozen=True)
class SmoothedLabelerGradient:
    """Non-abstain part of the smoothed labeler's gradient: ``{(feature, class): value}``."""

    labeler_index: int
    entries: dict


def _top_k_support(w: np.ndarray, top_k: int | None) -> np.ndarray:
    supp = np.flatnonzero(w)
    if top_k is None or top_k >= len(supp):
        return supp
    # Stable: ties in magnitude keep the lower feature index.
    order = np.argsort(-np.abs(w[supp]), kind="stable")[:top_k]
    return np.sort(supp[order])


def smoothed_gradient(spec: LabelerSpec, phi, num_classes: int | None = None, labeler_index: int = 0,
                      top_k: int | None = None) -> SmoothedLabelerGradient:
    """Gradient of the smoothed labeler restricted to non-abstain outputs.

    For linear rules the labeler's own input gradient is used: ``+w`` on the
    class it votes at ``phi`` when that is its positive-score class, ``-w``
    otherwise, limited to the ``top_k`` largest-magnitude weights.
    """
    phi = _check_phi(phi)
    if spec.kind == KEYWORD:
        S = list(spec.keyword_indices)
        loo = _leave_one_out_products(1.0 - phi[S])
        return SmoothedLabelerGradient(labeler_index, {(j, spec.voted_class): float(g) for j, g in zip(S, loo)})
    vote = int(spec.vote(phi)[0])
    if vote == ABSTAIN:
        return SmoothedLabelerGradient(labeler_index, {})
    sign = 1.0 if vote == spec.class_mapping[1] else -1.0
    supp = _top_k_support(spec.weights, top_k)
    return SmoothedLabelerGradient(labeler_index, {(int(j), vote): sign * float(spec.weights[j]) for j in supp})


@dataclass(frozen=True)
class GradientTable:
    """All labeler-gradient entries over a set of rows, in COO form.

    Entry ``e`` says: on row ``row[e]``, labeler ``labeler[e]`` wants
    ``d h_{cls[e]} / d x_{feature[e]}`` to be at least ``c * value[e]``.
    """

    row: np.ndarray
    labeler: np.ndarray
    feature: np.ndarray
    cls: np.ndarray
    value: np.ndarray

    def __len__(self):
        return len(self.row)

    def select_rows(self, rows: np.ndarray) -> "GradientTable":
        """Entries for ``rows`` (in that order), re-indexed to positions 0..len(rows)-1."""
        rows = np.asarray(rows)
        pos = np.full(int(self.row.max(initial=-1)) + 1, -1, dtype=np.int64)
        valid = rows < len(pos)
        pos[rows[valid]] = np.flatnonzero(valid)
        keep = pos[self.row] >= 0 if len(self.row) else np.zeros(0, dtype=bool)
        new_row = pos[self.row[keep]]
        order = np.argsort(new_row, kind="stable")
        return GradientTable(new_row[order], self.labeler[keep][order], self.feature[keep][order],
                             self.cls[keep][order], self.value[keep][order])


def gradient_table(specs: Sequence[LabelerSpec | None], phi: np.ndarray, votes: np.ndarray,
                   top_k: int | None = None) -> GradientTable:
    """Vectorised :func:`smoothed_gradient` for every voting (row, labeler) pair.

    ``specs[i] is None`` marks a labeler whose gradient is unknown; it
    contributes no entries.
    """
    phi = _check_phi(phi)
    parts = []
    for i, spec in enumerate(specs):
        if spec is None:
            continue
        rows = np.flatnonzero(votes[:, i] != ABSTAIN)
        if not len(rows):
            continue
        if spec.kind == KEYWORD:
            S = np.asarray(spec.keyword_indices)
            loo = _leave_one_out_products(1.0 - phi[np.ix_(rows, S)])
            r = np.repeat(rows, len(S))
            f = np.tile(S, len(rows))
            c = np.full(len(r), spec.voted_class)
            v = loo.ravel()
        else:
            supp = _top_k_support(spec.weights, top_k)
            sign = np.where(votes[rows, i] == spec.class_mapping[1], 1.0, -1.0)
            r = np.repeat(rows, len(supp))
            f = np.tile(supp, len(rows))
            c = np.repeat(votes[rows, i], len(supp))
            v = (sign[:, None] * spec.weights[supp][None, :]).ravel()
        parts.append((r, np.full(len(r), i), f, c, v))
    if not parts:
        z = np.zeros(0, dtype=np.int64)
        return GradientTable(z, z, z, z, np.zeros(0))
    cols = [np.concatenate(p) for p in zip(*parts)]
    order = np.lexsort((cols[3], cols[2], cols[1], cols[0]))
    return GradientTable(cols[0][order].astype(np.int64), cols[1][order].astype(np.int64),
                         cols[2][order].astype(np.int64), cols[3][order].astype(np.int64),
                         cols[4][order].astype(np.float64))


# --------------------------------------------------------------------------- spec files

def load_labeler_specs(path, schema) -> list[LabelerSpec]:
    """Read a JSON array of labeler definitions, resolving keyword words through ``schema``."""
    raw = json.loads(Path(path).read_text(encoding="utf-8"))
    if not isinstance(raw, list):
        raise ValueError(f"{path}: expected a JSON array of labelers")
    return [spec_from_dict(obj, schema) for obj in raw]


def spec_from_dict(obj: dict, schema) -> LabelerSpec:
    name, kind = obj["name"], obj.get("kind", KEYWORD)
    if kind == KEYWORD:
        idx = []
        for w in obj["keywords"]:
            idx.append(w if isinstance(w, int) else schema.feature_index(w))
        spec = LabelerSpec.keyword(name, idx, obj["class"])
    elif kind == LINEAR:
        weights = obj["weights"]
        if isinstance(weights, dict):
            w = np.zeros(schema.feature_dim)
            for word, val in weights.items():
                w[schema.feature_index(word)] = val
        else:
            w = np.asarray(weights, dtype=np.float64)
        spec = LabelerSpec.linear(name, w, obj.get("bias", 0.0), tuple(obj.get("classes", (0, 1))),
                                  obj.get("abstainBand", 0.0))
    else:
        raise ValueError(f"labeler {name!r}: unknown kind {kind!r}")
    spec.check(schema.num_classes, schema.feature_dim)
    return spec


def spec_to_dict(spec: LabelerSpec, schema=None) -> dict:
    names = schema.feature_names if schema is not None else None
    if spec.kind == KEYWORD:
        kws = [names[j] for j in spec.keyword_indices] if names else list(spec.keyword_indices)
        return {"name": spec.name, "kind": KEYWORD, "keywords": kws, "class": spec.voted_class}
    supp = spec.support
    if names:
        weights = {names[j]: float(spec.weights[j]) for j in supp}
    else:
        weights = spec.weights.tolist()
    return {"name": spec.name, "kind": LINEAR, "weights": weights, "bias": spec.bias,
            "classes": list(spec.class_mapping), "abstainBand": spec.abstain_band}


def save_labeler_specs(specs: Sequence[LabelerSpec], path, schema=None) -> None:
    Path(path).write_text(json.dumps([spec_to_dict(s, schema) for s in specs], indent=1, sort_keys=True),
                          encoding="utf-8")


def votes_to_dict(vm: VoteMatrix) -> dict:
    return {"labelerNames": list(vm.labeler_names), "numClasses": vm.num_classes, "abstain": ABSTAIN,
            "votes": vm.votes.tolist()}


def save_votes(vm: VoteMatrix, path) -> None:
    Path(path).write_text(json.dumps(votes_to_dict(vm), sort_keys=True), encoding="utf-8")


def load_votes(path) -> VoteMatrix:
    obj = json.loads(Path(path).read_text(encoding="utf-8"))
    votes = np.asarray(obj["votes"], dtype=np.int64).reshape(-1, len(obj["labelerNames"]))
    votes[votes == obj.get("abstain", ABSTAIN)] = ABSTAIN
    return VoteMatrix(votes, tuple(obj["labelerNames"]), obj["numClasses"])
