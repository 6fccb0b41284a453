"""Training loop, validation-based model selection, sweeps, and multi-seed ablations."""
from __future__ import annotations

import dataclasses
import itertools
import json
import logging
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import rng as rng_streams
from .data import Dataset
from .labelers import GradientTable, LabelerSpec, VoteMatrix, apply_labelers, gradient_table
from .labelmodels import (AccuracyEstimate, UnsupportedTaskError, majority_vote_hard, majority_vote_soft,
                          triplet_accuracies, triplet_soft_labels)
from .losses import LossConfig, batch_objective, bernoulli_params, build_weight_scheme, pseudolabel_objective
from .nnet import MLP, OptimizerState, adam_step

log = logging.getLogger(__name__)

LOSS_METHODS = ("LoL", "LoL-simple", "LoL-c", "LoL-a")
PSEUDOLABEL_METHODS = ("MV", "SoftMV", "T-Mean", "T-Median")
METHODS = LOSS_METHODS + PSEUDOLABEL_METHODS
BINARY_ONLY = ("T-Mean", "T-Median")
_NO_INDEX = np.zeros(0, dtype=np.int64)
EMPTY_TABLE = GradientTable(_NO_INDEX, _NO_INDEX, _NO_INDEX, _NO_INDEX, np.zeros(0))


class EmptyTrainingSetError(ValueError):
    """Every training row abstained, so there is nothing to learn from."""


@dataclass(frozen=True)
class RunConfig:
    method: str = "LoL"
    loss: LossConfig = field(default_factory=LossConfig)
    learning_rate: float = 0.001
    weight_decay: float = 0.0
    epochs: int = 30
    batch_size: int = 128
    seed: int = 0
    max_train: int | None = None
    hidden: tuple[int, ...] = (64, 16)
    dropout: float = 0.2

    def __post_init__(self):
        if self.method not in METHODS:
            raise ValueError(f"unknown method {self.method!r}; choose from {', '.join(METHODS)}")
        if self.epochs < 1 or self.batch_size < 1:
            raise ValueError("epochs and batch_size must be positive")
        if self.max_train is not None and self.max_train < 1:
            raise ValueError("max_train must be positive")

    @property
    def uses_penalty(self) -> bool:
        return self.method in ("LoL", "LoL-c", "LoL-a") and self.loss.penalty != "none"

    def effective_loss(self) -> LossConfig:
        """Loss settings implied by the method (weighting, and no penalty for LoL-simple)."""
        weighting = {"LoL": "uniform", "LoL-simple": "uniform", "LoL-c": "coverage", "LoL-a": "accuracy"}
        if self.method not in weighting:
            return self.loss
        penalty = "none" if self.method == "LoL-simple" else self.loss.penalty
        return dataclasses.replace(self.loss, weighting=weighting[self.method], penalty=penalty)

    def check_task(self, num_classes: int) -> None:
        if self.method in BINARY_ONLY and num_classes != 2:
            raise UnsupportedTaskError(f"{self.method} is defined for binary classification tasks only "
                                       f"(task has {num_classes} classes)")

    def to_dict(self) -> dict:
        return {"method": self.method, "loss": self.loss.to_dict(), "learningRate": self.learning_rate,
                "weightDecay": self.weight_decay, "epochs": self.epochs, "batchSize": self.batch_size,
                "seed": self.seed, "maxTrain": self.max_train, "hidden": list(self.hidden),
                "dropout": self.dropout}

    @classmethod
    def from_dict(cls, obj: dict) -> "RunConfig":
        kw = {}
        names = {"method": "method", "learningRate": "learning_rate", "weightDecay": "weight_decay",
                 "epochs": "epochs", "batchSize": "batch_size", "seed": "seed", "maxTrain": "max_train",
                 "dropout": "dropout"}
        for k, v in obj.items():
            if k in names:
                kw[names[k]] = v
        if "hidden" in obj:
            kw["hidden"] = tuple(obj["hidden"])
        if "loss" in obj:
            kw["loss"] = LossConfig.from_dict(obj["loss"])
        return cls(**kw)


@dataclass
class WeakTask:
    """Splits plus the labelers' votes on the training split.

    ``specs[i]`` may be ``None`` for a labeler known only through its votes;
    such labelers get the plain loss and no gradient penalty.
    """

    train: Dataset
    validation: Dataset
    test: Dataset
    votes: VoteMatrix
    specs: list
    name: str = "task"

    @classmethod
    def from_specs(cls, train, validation, test, specs: Sequence[LabelerSpec], name: str = "task") -> "WeakTask":
        vm = apply_labelers(specs, train, train.schema.num_classes)
        return cls(train, validation, test, vm, list(specs), name)

    @property
    def num_classes(self) -> int:
        return self.train.schema.num_classes


@dataclass
class TrainReport:
    config: dict
    epochs: list
    selected_epoch: int
    validation_accuracy: float
    test_accuracy: float
    test_confusion: list
    num_train_rows: int
    num_supervised_rows: int
    task: str = "task"
    wall_time: float = 0.0
    batch_losses: list = field(default_factory=list, repr=False)

    def to_dict(self) -> dict:
        # wall time is kept out so report files are reproducible byte-for-byte
        return {"task": self.task, "config": self.config, "epochs": self.epochs,
                "selectedEpoch": self.selected_epoch, "validationAccuracy": self.validation_accuracy,
                "testAccuracy": self.test_accuracy, "testConfusion": self.test_confusion,
                "numTrainRows": self.num_train_rows, "numSupervisedRows": self.num_supervised_rows}

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, indent=1)

    @classmethod
    def from_dict(cls, obj: dict) -> "TrainReport":
        return cls(obj["config"], obj["epochs"], obj["selectedEpoch"], obj["validationAccuracy"],
                   obj["testAccuracy"], obj["testConfusion"], obj["numTrainRows"], obj["numSupervisedRows"],
                   obj.get("task", "task"))


def evaluate(model: MLP, ds: Dataset) -> tuple[float, np.ndarray]:
    """Accuracy of ``argmax h(x)`` (ties to the lowest class) and the confusion counts ``[gold, pred]``."""
    gold = ds.oracle_labels()
    pred = np.argmax(model.predict_proba(ds.dense()), axis=1)
    k = ds.schema.num_classes
    confusion = np.zeros((k, k), dtype=np.int64)
    np.add.at(confusion, (gold, pred), 1)
    acc = float(np.mean(pred == gold)) if len(gold) else float("nan")
    return acc, confusion


def _training_rows(cfg: RunConfig, n: int) -> np.ndarray:
    if cfg.max_train is None or cfg.max_train >= n:
        return np.arange(n)
    pick = rng_streams.stream(cfg.seed, "subsample").choice(n, size=cfg.max_train, replace=False)
    return np.sort(pick)


def _pseudolabels(cfg: RunConfig, vm: VoteMatrix) -> np.ndarray:
    if cfg.method == "MV":
        hard = majority_vote_hard(vm, cfg.seed)
        return np.eye(vm.num_classes)[hard]
    if cfg.method == "SoftMV":
        return majority_vote_soft(vm)
    agg = "mean" if cfg.method == "T-Mean" else "median"
    acc = triplet_accuracies(vm, agg, strict=False)
    return triplet_soft_labels(vm, acc)


def _accuracy_for_weights(task: WeakTask, vm: VoteMatrix, given: AccuracyEstimate | None):
    if given is not None:
        return given
    if task.num_classes != 2:
        return None
    return triplet_accuracies(vm, "mean", strict=False)


def train_once(cfg: RunConfig, task: WeakTask, accuracy: AccuracyEstimate | None = None,
               metrics_stream=None) -> tuple[MLP, TrainReport]:
    """Train one model and return the checkpoint of its best validation epoch."""
    start = time.perf_counter()
    k = task.num_classes
    cfg.check_task(k)
    rows = _training_rows(cfg, len(task.train))
    vm = task.votes.rows(rows)
    supervised = vm.non_abstain_counts() > 0
    if not supervised.any():
        raise EmptyTrainingSetError("every labeler abstains on every training row")
    rows = rows[supervised]
    vm = task.votes.rows(rows)
    X = task.train.features[rows].toarray()
    X_bin = (X > 0).astype(np.float64)
    n = len(rows)

    loss_cfg = cfg.effective_loss()
    table = None
    if cfg.method in LOSS_METHODS:
        acc = None
        if loss_cfg.weighting == "accuracy":
            acc = _accuracy_for_weights(task, vm, accuracy)
            if acc is None:
                log.warning("accuracy weighting needs a binary task; using uniform weights")
                loss_cfg = dataclasses.replace(loss_cfg, weighting="uniform")
        weights = build_weight_scheme(loss_cfg.weighting, vm, acc).weights
        if loss_cfg.penalty != "none":
            phi = bernoulli_params(X_bin, loss_cfg.smoothing_epsilon)
            table = gradient_table(task.specs, phi, vm.votes, loss_cfg.top_k)
    else:
        targets = _pseudolabels(cfg, vm)

    model = MLP.initialize([X.shape[1], *cfg.hidden, k], rng_streams.stream(cfg.seed, "init"), cfg.dropout)
    opt = OptimizerState.for_model(model, cfg.learning_rate, cfg.weight_decay)
    batch_rng = rng_streams.stream(cfg.seed, "batching")
    dropout_rng = rng_streams.stream(cfg.seed, "dropout")
    smooth_rng = rng_streams.stream(cfg.seed, "smoothing")

    history, batch_losses = [], []
    best_acc, best_epoch, best_params = -1.0, 0, None
    for epoch in range(1, cfg.epochs + 1):
        order = batch_rng.permutation(n)
        totals = np.zeros(3)
        for s in range(0, n, cfg.batch_size):
            idx = order[s:s + cfg.batch_size]
            if cfg.method in LOSS_METHODS:
                sub = table.select_rows(idx) if table is not None else EMPTY_TABLE
                res, grads = batch_objective(model, X[idx], vm.votes[idx], sub, loss_cfg, weights,
                                             dropout_rng=dropout_rng, smoothing_rng=smooth_rng, train=True,
                                             X_bin=X_bin[idx])
            else:
                res, grads = pseudolabel_objective(model, X[idx], targets[idx], dropout_rng=dropout_rng)
            adam_step(model, opt, grads)
            batch_losses.append(res.value)
            totals += len(idx) * np.array([res.value, res.classification, res.penalty])
        val_acc, _ = evaluate(model, task.validation)
        rec = {"epoch": epoch, "trainLoss": totals[0] / n, "classificationLoss": totals[1] / n,
               "penaltyLoss": totals[2] / n, "validationAccuracy": val_acc}
        history.append(rec)
        if metrics_stream is not None:
            metrics_stream.write(json.dumps(rec, sort_keys=True) + "\n")
        if val_acc > best_acc:
            best_acc, best_epoch = val_acc, epoch
            best_params = [p.copy() for p in model.params()]

    model.set_params(best_params)
    test_acc, confusion = evaluate(model, task.test)
    report = TrainReport(cfg.to_dict(), history, best_epoch, best_acc, test_acc, confusion.tolist(),
                         num_train_rows=len(_training_rows(cfg, len(task.train))), num_supervised_rows=n,
                         task=task.name, wall_time=time.perf_counter() - start, batch_losses=batch_losses)
    return model, report


# ---------------------------------------------------------------------- sweeps

@dataclass(frozen=True)
class SweepSpec:
    learning_rates: tuple[float, ...] = (0.1, 0.01, 0.001, 0.0001)
    weight_decays: tuple[float, ...] = (0.0, 0.01, 0.001)
    cs: tuple[float, ...] = tuple(np.linspace(0.0, 5.0, 6).tolist())
    alphas: tuple[float, ...] = (0.1, 0.01, 0.001, 0.0001, 0.00001)
    budget: int | None = None
    seed: int = 0

    def __post_init__(self):
        if not (self.learning_rates and self.weight_decays and self.cs and self.alphas):
            raise ValueError("every sweep grid must be non-empty")
        if self.budget is not None and self.budget < 1:
            raise ValueError("sweep budget must be at least 1")

    def configs(self, template: RunConfig) -> list[RunConfig]:
        if template.uses_penalty:
            combos = [dict(learning_rate=lr, weight_decay=wd, loss=dataclasses.replace(template.loss, c=c, alpha=a))
                      for lr, wd, c, a in itertools.product(self.learning_rates, self.weight_decays,
                                                             self.cs, self.alphas)]
        else:
            combos = [dict(learning_rate=lr, weight_decay=wd)
                      for lr, wd in itertools.product(self.learning_rates, self.weight_decays)]
        if self.budget is not None and self.budget < len(combos):
            pick = rng_streams.stream(self.seed, "sweep").choice(len(combos), size=self.budget, replace=False)
            combos = [combos[i] for i in sorted(pick)]
        return [dataclasses.replace(template, **c) for c in combos]


@dataclass
class SweepResult:
    best: RunConfig
    best_index: int
    reports: list


def _selection_key(report: TrainReport, index: int):
    cfg = report.config
    alpha = cfg["loss"]["alpha"] if cfg["method"] in ("LoL", "LoL-c", "LoL-a") and \
        cfg["loss"]["penalty"] != "none" else 0.0
    return (-report.validation_accuracy, report.selected_epoch, alpha, cfg["learningRate"], index)


def _run_trial(args):
    cfg, task, accuracy = args
    return train_once(cfg, task, accuracy)[1]


def run_many(configs: Sequence[RunConfig], task: WeakTask, accuracy=None, jobs: int = 1) -> list[TrainReport]:
    """Train each config independently; results come back in input order."""
    work = [(c, task, accuracy) for c in configs]
    if jobs > 1 and len(work) > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            return list(pool.map(_run_trial, work))
    return [_run_trial(w) for w in work]


def sweep(spec: SweepSpec, template: RunConfig, task: WeakTask, accuracy=None, jobs: int = 1) -> SweepResult:
    configs = spec.configs(template)
    reports = run_many(configs, task, accuracy, jobs)
    best = min(range(len(reports)), key=lambda i: _selection_key(reports[i], i))
    return SweepResult(configs[best], best, reports)


# ---------------------------------------------------------------------- ablations

@dataclass
class AblationRow:
    method: str
    test_accuracies: list
    config: dict

    @property
    def mean(self) -> float:
        return float(np.mean(self.test_accuracies))

    @property
    def std(self) -> float:
        return float(np.std(self.test_accuracies, ddof=1)) if len(self.test_accuracies) > 1 else 0.0


@dataclass
class AblationTable:
    task: str
    seeds: list
    rows: list

    def row(self, method: str) -> AblationRow:
        return next(r for r in self.rows if r.method == method)

    def to_dict(self) -> dict:
        return {"task": self.task, "seeds": list(self.seeds),
                "rows": [{"method": r.method, "testAccuracies": r.test_accuracies, "mean": r.mean,
                          "std": r.std, "config": r.config} for r in self.rows]}

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, indent=1)

    def to_text(self) -> str:
        return render_table([{"task": self.task, "method": r.method, "cell": format_cell(r.mean, r.std),
                              "n": len(r.test_accuracies)} for r in self.rows], fmt="text")


def format_cell(mean: float, std: float) -> str:
    return f"{100 * mean:.1f} ± {100 * std:.1f}"


def render_table(records: Sequence[dict], fmt: str = "text") -> str:
    """Tasks down, methods across, ``mean ± std`` cells (accuracy in percent)."""
    tasks = list(dict.fromkeys(r["task"] for r in records))
    methods = list(dict.fromkeys(r["method"] for r in records))
    cells = {(r["task"], r["method"]): r["cell"] for r in records}
    header = [""] + methods
    body = [[t] + [cells.get((t, m), "--") for m in methods] for t in tasks]
    if fmt == "csv":
        import csv
        import io
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["task"] + methods)
        w.writerows(body)
        return buf.getvalue()
    widths = [max(len(str(row[i])) for row in [header] + body) for i in range(len(header))]
    lines = [" | ".join(str(c).ljust(w) for c, w in zip(row, widths)).rstrip() for row in [header] + body]
    lines.insert(1, "-+-".join("-" * w for w in widths))
    return "\n".join(lines) + "\n"


def ablation_suite(task: WeakTask, methods: Sequence[str], seeds: Sequence[int], spec: SweepSpec,
                   template: RunConfig = RunConfig(), per_seed_search: bool = False, accuracy=None,
                   jobs: int = 1) -> AblationTable:
    """Mean and sample std of test accuracy per method over ``seeds``.

    By default hyperparameters are searched once (with the first seed) and
    the chosen config is retrained under every seed; ``per_seed_search``
    repeats the search for each seed instead.
    """
    if len(seeds) < 2:
        raise ValueError("an ablation needs at least two seeds")
    rows = []
    for method in methods:
        base = dataclasses.replace(template, method=method)
        accs = []
        if per_seed_search:
            for s in seeds:
                res = sweep(spec, dataclasses.replace(base, seed=s), task, accuracy, jobs)
                accs.append(res.reports[res.best_index].test_accuracy)
            chosen = res.best.to_dict()
        else:
            res = sweep(spec, dataclasses.replace(base, seed=seeds[0]), task, accuracy, jobs)
            rest = run_many([dataclasses.replace(res.best, seed=s) for s in seeds[1:]], task, accuracy, jobs)
            accs = [res.reports[res.best_index].test_accuracy] + [r.test_accuracy for r in rest]
            chosen = res.best.to_dict()
        log.info("%s: %s", method, format_cell(float(np.mean(accs)), float(np.std(accs, ddof=1))))
        rows.append(AblationRow(method, accs, chosen))
    return AblationTable(task.name, list(seeds), rows)
