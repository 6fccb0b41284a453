"""Reader for WRENCH-style benchmark directories.

A directory holds ``train.json``, ``valid.json`` and ``test.json``. Each maps
an example id to ``{"label": int, "weak_labels": [int, ...], "data": {"text": str}}``
with ``-1`` marking an abstention. An optional ``label.json`` maps class ids
to names.
"""
from __future__ import annotations

import json
from pathlib import Path

import numpy as np

from . import ABSTAIN
from .data import CorpusError, Dataset, TaskSchema, build_vocabulary, tokenize, vectorize
from .labelers import VoteMatrix

SPLIT_FILES = {"train": "train.json", "validation": "valid.json", "test": "test.json"}


def _read_split(path: Path):
    if not path.exists():
        raise FileNotFoundError(f"missing WRENCH split file {path}")
    raw = json.loads(path.read_text(encoding="utf-8"))
    texts, labels, weak = [], [], []
    # ids are usually "0", "1", ...; keep file order for non-numeric ids
    keys = sorted(raw, key=lambda s: (0, int(s)) if str(s).isdigit() else (1, 0))
    for key in keys:
        ex = raw[key]
        data = ex.get("data", {})
        text = data.get("text") if isinstance(data, dict) else None
        if not isinstance(text, str):
            raise CorpusError(f"{path}: example {key!r} has no data.text string")
        texts.append(text)
        labels.append(int(ex["label"]))
        weak.append([int(v) for v in ex["weak_labels"]])
    return texts, np.array(labels, dtype=np.int64), weak


def load_wrench(directory, vocab_limit: int = 5000, binarize: bool = True):
    """Featurize a WRENCH directory; returns ``(train, validation, test, train votes)``.

    The vocabulary comes from the training texts only. The labelers are
    known only through their votes, so they contribute no gradient penalty.
    """
    directory = Path(directory)
    splits = {name: _read_split(directory / fname) for name, fname in SPLIT_FILES.items()}
    tokens = {name: [tokenize(t) for t in s[0]] for name, s in splits.items()}
    vocab = build_vocabulary(tokens["train"], vocab_limit)
    all_labels = np.concatenate([s[1] for s in splits.values()])
    k = int(all_labels.max()) + 1
    names = None
    if (directory / "label.json").exists():
        mapping = json.loads((directory / "label.json").read_text(encoding="utf-8"))
        k = max(k, len(mapping))
        names = tuple(str(mapping.get(str(c), c)) for c in range(k))
    schema = TaskSchema(k, names or tuple(str(c) for c in range(k)), len(vocab), tuple(vocab))
    out = {}
    for name, (texts, gold, _) in splits.items():
        out[name] = Dataset(schema, vectorize(tokens[name], vocab, binarize), name, gold)
    weak = np.array(splits["train"][2], dtype=np.int64)
    weak[weak < 0] = ABSTAIN
    m = weak.shape[1]
    vm = VoteMatrix(weak, tuple(f"lf{i}" for i in range(m)), k)
    return out["train"], out["validation"], out["test"], vm
