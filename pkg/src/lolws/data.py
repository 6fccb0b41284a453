"""Bag-of-words ingestion, synthetic weak-supervision tasks, and dataset splits."""
from __future__ import annotations

import json
import math
import re
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
import scipy.sparse as sp

from . import rng as rng_streams

SPLITS = ("train", "validation", "test")
FORMAT_VERSION = 1
MISSING = -1

_TOKEN_RE = re.compile(r"[a-z0-9]+")


class CorpusError(ValueError):
    """Raised for malformed corpus input; carries the 1-based line number when known."""

    def __init__(self, message: str, line: int | None = None):
        self.line = line
        super().__init__(f"line {line}: {message}" if line is not None else message)


class GoldLabelAccessError(RuntimeError):
    """Training-split gold labels were requested through the non-oracle accessor."""


@dataclass(frozen=True)
class TaskSchema:
    num_classes: int
    class_names: tuple[str, ...]
    feature_dim: int
    feature_names: tuple[str, ...] | None = None

    def __post_init__(self):
        if self.num_classes < 2:
            raise ValueError(f"need at least 2 classes, got {self.num_classes}")
        if self.feature_dim < 1:
            raise ValueError("feature_dim must be positive")
        if len(self.class_names) != self.num_classes or len(set(self.class_names)) != self.num_classes:
            raise ValueError("class_names must be unique and of length num_classes")
        if self.feature_names is not None:
            if len(self.feature_names) != self.feature_dim:
                raise ValueError("feature_names length must equal feature_dim")
            if len(set(self.feature_names)) != self.feature_dim:
                raise ValueError("feature_names must be unique")

    @classmethod
    def simple(cls, num_classes: int, feature_dim: int, feature_names=None) -> "TaskSchema":
        names = tuple(str(c) for c in range(num_classes))
        fnames = tuple(feature_names) if feature_names is not None else None
        return cls(num_classes, names, feature_dim, fnames)

    def feature_index(self, word: str) -> int:
        if self.feature_names is None:
            raise KeyError("schema has no feature names")
        try:
            return self.feature_names.index(word)
        except ValueError:
            raise KeyError(f"word {word!r} not in vocabulary") from None


@dataclass(frozen=True)
class Example:
    indices: np.ndarray
    counts: np.ndarray
    gold_label: int | None = None


@dataclass(frozen=True, eq=False)
class Dataset:
    """Sparse bag-of-words examples for one split.

    Gold labels of the training split are only reachable through
    :meth:`oracle_labels`, which is reserved for evaluation code.
    """

    schema: TaskSchema
    features: sp.csr_matrix
    split: str
    _gold: np.ndarray | None = field(default=None, repr=False)

    def __post_init__(self):
        if self.split not in SPLITS:
            raise ValueError(f"unknown split {self.split!r}")
        X = sp.csr_matrix(self.features, dtype=np.float64)
        X.sort_indices()
        object.__setattr__(self, "features", X)
        if X.shape[1] != self.schema.feature_dim:
            raise ValueError(f"features have {X.shape[1]} columns, schema says {self.schema.feature_dim}")
        if X.nnz and X.data.min() < 0:
            raise ValueError("bag-of-words features must be non-negative")
        if self._gold is not None:
            gold = np.asarray(self._gold, dtype=np.int64)
            if gold.shape != (X.shape[0],):
                raise ValueError("gold label vector does not match number of examples")
            bad = (gold != MISSING) & ((gold < 0) | (gold >= self.schema.num_classes))
            if bad.any():
                raise ValueError(f"gold label out of range at row {int(np.flatnonzero(bad)[0])}")
            object.__setattr__(self, "_gold", gold)
        if self.split != "train" and not self.has_gold:
            raise ValueError(f"{self.split} split requires a gold label on every example")

    def __len__(self) -> int:
        return self.features.shape[0]

    @property
    def has_gold(self) -> bool:
        return self._gold is not None and bool(np.all(self._gold != MISSING))

    @property
    def labels(self) -> np.ndarray:
        if self.split == "train":
            raise GoldLabelAccessError("training-split gold labels are oracle-only; use oracle_labels()")
        return self._gold.copy()

    def oracle_labels(self) -> np.ndarray:
        if not self.has_gold:
            raise ValueError(f"{self.split} split has missing gold labels")
        return self._gold.copy()

    def dense(self) -> np.ndarray:
        return self.features.toarray()

    def binary(self) -> np.ndarray:
        return (self.features.toarray() > 0).astype(np.float64)

    def example(self, i: int) -> Example:
        row = self.features.getrow(i)
        gold = None
        if self._gold is not None and self.split != "train" and self._gold[i] != MISSING:
            gold = int(self._gold[i])
        return Example(row.indices.copy(), row.data.copy(), gold)

    def subset(self, rows: Sequence[int], split: str | None = None) -> "Dataset":
        rows = np.asarray(rows, dtype=np.int64)
        gold = None if self._gold is None else self._gold[rows]
        return Dataset(self.schema, self.features[rows], split or self.split, gold)


# --------------------------------------------------------------------------- featurize

def tokenize(text: str) -> list[str]:
    return _TOKEN_RE.findall(text.lower())


def read_corpus(path) -> tuple[list[str], list[tuple[int | None, int]]]:
    """Texts plus ``(label, line number)`` pairs from a JSONL corpus."""
    texts, labels = [], []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as exc:
                raise CorpusError(f"invalid JSON ({exc.msg})", lineno) from None
            if not isinstance(obj, dict) or not isinstance(obj.get("text"), str):
                raise CorpusError("expected an object with a string 'text' field", lineno)
            label = obj.get("label")
            if label is not None and (isinstance(label, bool) or not isinstance(label, int)):
                raise CorpusError(f"label must be an integer, got {label!r}", lineno)
            texts.append(obj["text"])
            labels.append((label, lineno))
    if not texts:
        raise CorpusError(f"empty corpus: {path}")
    return texts, labels


def build_vocabulary(token_lists: Sequence[Sequence[str]], limit: int) -> list[str]:
    """Top-``limit`` tokens by frequency (ties lexicographic), listed in first-appearance order."""
    if limit < 1:
        raise ValueError("vocabulary limit must be positive")
    counts = Counter(tok for toks in token_lists for tok in toks)
    keep = {tok for tok, _ in sorted(counts.items(), key=lambda kv: (-kv[1], kv[0]))[:limit]}
    vocab, seen = [], set()
    for toks in token_lists:
        for tok in toks:
            if tok in keep and tok not in seen:
                seen.add(tok)
                vocab.append(tok)
    return vocab


def vectorize(token_lists, vocab: Sequence[str], binarize: bool = False) -> sp.csr_matrix:
    index = {w: j for j, w in enumerate(vocab)}
    indptr, indices, data = [0], [], []
    for toks in token_lists:
        c = Counter(index[t] for t in toks if t in index)
        for j in sorted(c):
            indices.append(j)
            data.append(1.0 if binarize else float(c[j]))
        indptr.append(len(indices))
    return sp.csr_matrix((data, indices, indptr), shape=(len(token_lists), len(vocab)), dtype=np.float64)


def featurize(corpus_path, vocab_limit: int, binarize: bool = False, num_classes: int | None = None,
              vocab: Sequence[str] | None = None, split: str = "train") -> tuple[Dataset, TaskSchema]:
    """Read a JSONL corpus into a bag-of-words :class:`Dataset`.

    ``vocab`` reuses an existing vocabulary (e.g. the training one when
    featurizing held-out text); otherwise it is built from this corpus.
    """
    texts, labels = read_corpus(corpus_path)
    tokens = [tokenize(t) for t in texts]
    if vocab is None:
        vocab = build_vocabulary(tokens, vocab_limit)
    if not vocab:
        raise CorpusError(f"corpus {corpus_path} has no tokens")
    present = [lab for lab, _ in labels if lab is not None]
    if num_classes is None:
        num_classes = max(2, max(present) + 1) if present else 2
    gold = np.full(len(texts), MISSING, dtype=np.int64)
    for i, (lab, lineno) in enumerate(labels):
        if lab is None:
            continue
        if not 0 <= lab < num_classes:
            raise CorpusError(f"label {lab} outside [0, {num_classes})", lineno)
        gold[i] = lab
    schema = TaskSchema.simple(num_classes, len(vocab), vocab)
    X = vectorize(tokens, vocab, binarize)
    return Dataset(schema, X, split, gold if present else None), schema


# --------------------------------------------------------------------------- cache

def dataset_to_json(ds: Dataset) -> str:
    X = ds.features
    rows = [[X.indices[X.indptr[i]:X.indptr[i + 1]].tolist(), X.data[X.indptr[i]:X.indptr[i + 1]].tolist()]
            for i in range(len(ds))]
    payload = {
        "formatVersion": FORMAT_VERSION,
        "k": ds.schema.num_classes,
        "d": ds.schema.feature_dim,
        "classNames": list(ds.schema.class_names),
        "featureNames": list(ds.schema.feature_names) if ds.schema.feature_names else None,
        "split": ds.split,
        "rows": rows,
        "labels": None if ds._gold is None else ds._gold.tolist(),
    }
    return json.dumps(payload, sort_keys=True, separators=(",", ":"))


def dataset_from_json(text: str) -> Dataset:
    obj = json.loads(text)
    if obj.get("formatVersion") != FORMAT_VERSION:
        raise ValueError(f"unsupported dataset formatVersion {obj.get('formatVersion')!r}")
    names = obj.get("featureNames")
    schema = TaskSchema(obj["k"], tuple(obj["classNames"]), obj["d"], tuple(names) if names else None)
    indptr, indices, data = [0], [], []
    for idx, cnt in obj["rows"]:
        indices.extend(idx)
        data.extend(cnt)
        indptr.append(len(indices))
    X = sp.csr_matrix((data, indices, indptr), shape=(len(obj["rows"]), schema.feature_dim), dtype=np.float64)
    gold = None if obj["labels"] is None else np.asarray(obj["labels"], dtype=np.int64)
    return Dataset(schema, X, obj["split"], gold)


def save_dataset(ds: Dataset, path) -> None:
    Path(path).write_text(dataset_to_json(ds), encoding="utf-8")


def load_dataset(path) -> Dataset:
    return dataset_from_json(Path(path).read_text(encoding="utf-8"))


# --------------------------------------------------------------------------- synthetic

@dataclass(frozen=True)
class SyntheticTaskConfig:
    """Parameters of a synthetic weak-supervision task.

    Labeler keywords fire through a latent vote process, so coverage and
    accuracy hold in expectation exactly. ``labeler_kind`` picks single-class
    keyword rules (``"keyword"``) or two-sided keyword-pair rules
    (``"paired"``, binary only); ``None`` uses keyword rules when the
    requested accuracy/coverage is reachable by a one-class rule
    (``k * coverage * accuracy <= 1``) and pairs otherwise.
    """

    num_classes: int = 2
    feature_dim: int = 200
    num_train: int = 2000
    num_validation: int = 500
    num_test: int = 2000
    num_labelers: int = 8
    accuracy: float = 0.75
    coverage: float = 0.4
    signal_strength: float = 0.5
    seed: int = 0
    keywords_per_labeler: int = 1
    signal_per_class: int = 10
    base_rate: float = 0.05
    labeler_kind: str | None = None

    def resolved_kind(self) -> str:
        if self.labeler_kind is not None:
            return self.labeler_kind
        if self.num_classes * self.coverage * self.accuracy <= 1.0:
            return "keyword"
        return "paired"

    def validate(self) -> None:
        if not 0.0 < self.accuracy <= 1.0:
            raise ValueError(f"accuracy must lie in (0, 1], got {self.accuracy}")
        if not 0.0 < self.coverage <= 1.0:
            raise ValueError(f"coverage must lie in (0, 1], got {self.coverage}")
        if self.num_classes < 2 or self.num_labelers < 1 or self.keywords_per_labeler < 1:
            raise ValueError("need k >= 2, at least one labeler and one keyword per labeler")
        if min(self.num_train, self.num_validation, self.num_test) < 1:
            raise ValueError("every split needs at least one example")
        if not 0.0 < self.base_rate < 1.0:
            raise ValueError("base_rate must lie in (0, 1)")
        kind = self.resolved_kind()
        if kind == "keyword":
            k = self.num_classes
            if k * self.coverage * self.accuracy > 1.0 or k * self.coverage * (1 - self.accuracy) / (k - 1) > 1.0:
                raise ValueError("coverage/accuracy not reachable by single-class keyword labelers")
            n_kw = self.num_labelers * self.keywords_per_labeler
        elif kind == "paired":
            if self.num_classes != 2:
                raise ValueError("paired labelers require a binary task")
            n_kw = 2 * self.num_labelers
        else:
            raise ValueError(f"unknown labeler kind {kind!r}")
        if n_kw + self.num_classes * self.signal_per_class > self.feature_dim:
            raise ValueError("feature_dim too small for the requested keywords and signal features")


def _sigmoid(z):
    return 1.0 / (1.0 + math.exp(-z))


def generate_synthetic(cfg: SyntheticTaskConfig):
    """Draw train/validation/test splits and the labelers that weakly label them.

    Returns ``(train, validation, test, specs)``. Every split keeps gold
    labels; the training split's are oracle-only.
    """
    from .labelers import LabelerSpec

    cfg.validate()
    rng = rng_streams.stream(cfg.seed, "synthetic")
    k, d, m = cfg.num_classes, cfg.feature_dim, cfg.num_labelers
    kind = cfg.resolved_kind()
    n = cfg.num_train + cfg.num_validation + cfg.num_test

    perm = rng.permutation(d)
    n_kw = m * cfg.keywords_per_labeler if kind == "keyword" else 2 * m
    keyword_feats = perm[:n_kw]
    signal_feats = perm[n_kw:n_kw + k * cfg.signal_per_class].reshape(k, cfg.signal_per_class)

    y = rng.integers(0, k, size=n)
    p_signal = _sigmoid(math.log(cfg.base_rate / (1 - cfg.base_rate)) + cfg.signal_strength)
    probs = np.full((n, d), cfg.base_rate)
    for c in range(k):
        probs[np.ix_(y == c, signal_feats[c])] = p_signal
    probs[:, keyword_feats] = 0.0
    X = (rng.random((n, d)) < probs).astype(np.float64)

    specs = []
    fires = rng.random((n, m))
    correct = rng.random((n, m)) < cfg.accuracy
    if kind == "keyword":
        kw = keyword_feats.reshape(m, cfg.keywords_per_labeler)
        zipf = 1.0 / np.arange(1, cfg.keywords_per_labeler + 1)
        zipf /= zipf.sum()
        q_own = k * cfg.coverage * cfg.accuracy
        q_other = k * cfg.coverage * (1 - cfg.accuracy) / (k - 1)
        picks = rng.random((n, m))
        cdf = np.cumsum(zipf)
        for i in range(m):
            cls = i % k
            on = fires[:, i] < np.where(y == cls, q_own, q_other)
            which = np.minimum(np.searchsorted(cdf, picks[:, i], side="right"), len(cdf) - 1)
            X[on, kw[i, which[on]]] = 1.0
            specs.append(LabelerSpec.keyword(f"lf{i}", kw[i].tolist(), cls))
    else:
        for i in range(m):
            neg, pos = int(keyword_feats[2 * i]), int(keyword_feats[2 * i + 1])
            on = fires[:, i] < cfg.coverage
            vote = np.where(correct[:, i], y, 1 - y)
            X[on & (vote == 1), pos] = 1.0
            X[on & (vote == 0), neg] = 1.0
            w = np.zeros(d)
            w[pos], w[neg] = 1.0, -1.0
            specs.append(LabelerSpec.linear(f"lf{i}", w, 0.0, (0, 1), abstain_band=0.5))

    schema = TaskSchema.simple(k, d, [f"w{j}" for j in range(d)])
    cuts = np.cumsum([cfg.num_train, cfg.num_validation])
    parts = np.split(np.arange(n), cuts)
    out = [Dataset(schema, sp.csr_matrix(X[rows]), split, y[rows]) for rows, split in zip(parts, SPLITS)]
    return out[0], out[1], out[2], specs


# --------------------------------------------------------------------------- splits

def split_dataset(ds: Dataset, fractions=(0.8, 0.1, 0.1), seed: int = 0,
                  per_class_validation: int | None = None) -> tuple[Dataset, Dataset, Dataset]:
    """Shuffle and partition ``ds`` into train/validation/test.

    With ``per_class_validation=N`` the test split takes ``fractions[2]`` of
    the data and validation takes exactly ``N`` examples of every class from
    the remainder; the rest is training data.
    """
    fractions = tuple(float(f) for f in fractions)
    if len(fractions) != 3 or min(fractions) <= 0 or abs(sum(fractions) - 1.0) > 1e-9:
        raise ValueError(f"fractions must be three positive numbers summing to 1, got {fractions}")
    gold = ds.oracle_labels()
    n = len(ds)
    order = rng_streams.stream(seed, "split").permutation(n)
    if per_class_validation is None:
        n_train = int(round(n * fractions[0]))
        n_val = int(round(n * fractions[1]))
        if n_train + n_val > n:
            n_val = n - n_train
        train, val, test = order[:n_train], order[n_train:n_train + n_val], order[n_train + n_val:]
    else:
        n_test = int(round(n * fractions[2]))
        test, rest = order[:n_test], order[n_test:]
        val_rows = []
        for c in range(ds.schema.num_classes):
            of_class = rest[gold[rest] == c]
            if len(of_class) < per_class_validation:
                raise ValueError(f"class {c} has only {len(of_class)} examples, "
                                 f"{per_class_validation} requested for validation")
            val_rows.append(of_class[:per_class_validation])
        val = np.concatenate(val_rows)
        train = np.setdiff1d(rest, val, assume_unique=True)
        train = rest[np.isin(rest, train)]
    return ds.subset(train, "train"), ds.subset(val, "validation"), ds.subset(test, "test")
