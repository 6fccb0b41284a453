"""``lolws`` command line: featurize, synth, label, run, sweep, ablate, report.

A *data directory* holds ``train.json``, ``validation.json`` and ``test.json``
dataset caches, plus either ``labelers.json`` (labeler definitions) or
``votes.json`` (training-split votes of labelers known only by their output).

Exit codes: 0 success, 2 usage or configuration error, 3 numerical failure.
"""
from __future__ import annotations

import argparse
import dataclasses
import hashlib
import json
import logging
import os
import sys
from datetime import datetime, timezone
from pathlib import Path

import numpy as np

from . import __version__
from .data import (CorpusError, SyntheticTaskConfig, featurize, generate_synthetic, load_dataset,
                   save_dataset, split_dataset)
from .labelers import load_labeler_specs, load_votes, save_labeler_specs, save_votes
from .labelmodels import AccuracyEstimate, UnsupportedTaskError, oracle_accuracies, triplet_accuracies
from .nnet import NumericalError, save_checkpoint
from .train import (METHODS, RunConfig, SweepSpec, TrainReport, WeakTask, ablation_suite,
                    format_cell, render_table, sweep, train_once)

log = logging.getLogger("lolws")

EXIT_OK, EXIT_USAGE, EXIT_NUMERICAL = 0, 2, 3
SPLIT_NAMES = ("train", "validation", "test")


class UsageError(Exception):
    pass


# ---------------------------------------------------------------------- manifest helpers

def file_digest(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 16), b""):
            h.update(chunk)
    return h.hexdigest()


def config_hash(obj) -> str:
    """Hash of the canonical JSON form, so key order does not matter."""
    text = json.dumps(obj, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(text.encode("utf-8")).hexdigest()


def _now() -> str:
    return datetime.now(timezone.utc).isoformat(timespec="seconds")


def write_manifest(out_dir: Path, command: str, config: dict, inputs, outputs, started: str) -> dict:
    chash = config_hash(config)
    manifest = {
        "runId": f"{command}-{chash[:12]}",
        "command": command,
        "config": config,
        "configHash": chash,
        "inputs": {str(p): file_digest(p) for p in sorted(set(map(str, inputs))) if Path(p).is_file()},
        "outputs": {str(p): file_digest(p) for p in sorted(set(map(str, outputs))) if Path(p).is_file()},
        "startedAt": started,
        "finishedAt": _now(),
        "toolVersion": __version__,
    }
    (out_dir / "manifest.json").write_text(json.dumps(manifest, indent=1, sort_keys=True), encoding="utf-8")
    return manifest


def _write(path: Path, text: str) -> Path:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(text, encoding="utf-8")
    return path


# ---------------------------------------------------------------------- task loading

def load_task(data_dir, labelers=None, name=None):
    """Datasets plus votes from a data directory; returns ``(task, input files)``."""
    data_dir = Path(data_dir)
    if not data_dir.is_dir():
        raise UsageError(f"data directory {data_dir} does not exist")
    paths = [data_dir / f"{s}.json" for s in SPLIT_NAMES]
    for p in paths:
        if not p.exists():
            raise UsageError(f"missing dataset cache {p}")
    train, val, test = (load_dataset(p) for p in paths)
    task_name = name or data_dir.name
    spec_path = Path(labelers) if labelers else data_dir / "labelers.json"
    if labelers and not spec_path.exists():
        raise UsageError(f"labeler file {spec_path} does not exist")
    if spec_path.exists():
        specs = load_labeler_specs(spec_path, train.schema)
        return WeakTask.from_specs(train, val, test, specs, task_name), paths + [spec_path]
    votes_path = data_dir / "votes.json"
    if votes_path.exists():
        vm = load_votes(votes_path)
        if vm.n != len(train):
            raise UsageError(f"{votes_path} has {vm.n} rows but the training split has {len(train)}")
        return WeakTask(train, val, test, vm, [None] * vm.m, task_name), paths + [votes_path]
    raise UsageError(f"no labelers given and neither labelers.json nor votes.json in {data_dir}")


def _read_json(path) -> dict:
    p = Path(path)
    if not p.exists():
        raise UsageError(f"config file {p} does not exist")
    try:
        return json.loads(p.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise UsageError(f"{p}: invalid JSON ({exc.msg} at line {exc.lineno})") from None


def resolve_run(args):
    """Merge the JSON config file with command-line flags (flags win)."""
    cfg = _read_json(args.config) if getattr(args, "config", None) else {}
    base = Path(args.config).parent if getattr(args, "config", None) else Path(".")
    rel = lambda v: None if v is None else str(v) if Path(v).is_absolute() else str(base / v)
    data = args.data or rel(cfg.get("data"))
    cfg.pop("data", None)
    labelers = args.labelers or (rel(cfg["labelers"]) if cfg.get("labelers") else None)
    cfg.pop("labelers", None)
    accuracies = cfg.pop("accuracies", None)
    if getattr(args, "accuracies", None):
        accuracies = args.accuracies
    elif accuracies:
        accuracies = rel(accuracies)
    if data is None:
        raise UsageError("no data directory: pass --data or set 'data' in the config file")
    for flag, key in (("method", "method"), ("seed", "seed"), ("max_train", "maxTrain"), ("epochs", "epochs"),
                      ("lr", "learningRate"), ("wd", "weightDecay"), ("batch_size", "batchSize")):
        val = getattr(args, flag, None)
        if val is not None:
            cfg[key] = val
    loss = dict(cfg.get("loss", {}))
    for flag, key in (("penalty", "penalty"), ("alpha", "alpha"), ("c", "c"), ("top_k", "topK"),
                      ("smoothing_samples", "smoothingSamples"), ("smoothing_epsilon", "smoothingEpsilon")):
        val = getattr(args, flag, None)
        if val is not None:
            loss[key] = val
    cfg["loss"] = loss
    try:
        run_cfg = RunConfig.from_dict(cfg)
    except (TypeError, ValueError) as exc:
        raise UsageError(f"invalid run configuration: {exc}") from None
    return run_cfg, data, labelers, accuracies


def _load_accuracies(path, task):
    if not path:
        return None, []
    p = Path(path)
    if not p.exists():
        raise UsageError(f"accuracy file {p} does not exist")
    return AccuracyEstimate.from_json(p.read_text(encoding="utf-8"), task.votes.labeler_names), [p]


def _out_dir(args) -> Path:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


# ---------------------------------------------------------------------- commands

def cmd_featurize(args) -> int:
    started = _now()
    out = _out_dir(args)
    if args.wrench:
        from .wrench import load_wrench

        src = Path(args.wrench)
        if not src.is_dir():
            raise UsageError(f"WRENCH directory {src} does not exist")
        train, val, test, vm = load_wrench(src, args.vocab_limit, args.binarize)
        save_votes(vm, out / "votes.json")
        inputs = [src / f for f in ("train.json", "valid.json", "test.json")]
    else:
        if not args.corpus:
            raise UsageError("featurize needs --corpus or --wrench")
        corpus = Path(args.corpus)
        if not corpus.exists():
            raise UsageError(f"corpus file {corpus} does not exist")
        inputs = [corpus]
        if args.val_corpus or args.test_corpus:
            if not (args.val_corpus and args.test_corpus):
                raise UsageError("--val-corpus and --test-corpus must be given together")
            train, schema = featurize(corpus, args.vocab_limit, args.binarize, args.num_classes)
            vocab = schema.feature_names
            k = schema.num_classes
            val, _ = featurize(args.val_corpus, args.vocab_limit, args.binarize, k, vocab, "validation")
            test, _ = featurize(args.test_corpus, args.vocab_limit, args.binarize, k, vocab, "test")
            inputs += [Path(args.val_corpus), Path(args.test_corpus)]
        else:
            full, _ = featurize(corpus, args.vocab_limit, args.binarize, args.num_classes)
            fractions = tuple(float(x) for x in args.split.split(","))
            train, val, test = split_dataset(full, fractions, args.seed, args.val_per_class)
    outputs = []
    for name, ds in zip(SPLIT_NAMES, (train, val, test)):
        save_dataset(ds, out / f"{name}.json")
        outputs.append(out / f"{name}.json")
    config = {"vocabLimit": args.vocab_limit, "binarize": args.binarize, "seed": args.seed, "split": args.split,
              "valPerClass": args.val_per_class, "numClasses": args.num_classes}
    write_manifest(out, "featurize", config, inputs, outputs, started)
    print(f"featurized: d={train.schema.feature_dim} k={train.schema.num_classes} "
          f"train={len(train)} validation={len(val)} test={len(test)} -> {out}")
    return EXIT_OK


def cmd_synth(args) -> int:
    started = _now()
    out = _out_dir(args)
    overrides = _read_json(args.config) if args.config else {}
    if args.seed is not None:
        overrides["seed"] = args.seed
    try:
        cfg = SyntheticTaskConfig(**overrides)
        train, val, test, specs = generate_synthetic(cfg)
    except TypeError as exc:
        raise UsageError(f"invalid synthetic config: {exc}") from None
    outputs = []
    for name, ds in zip(SPLIT_NAMES, (train, val, test)):
        save_dataset(ds, out / f"{name}.json")
        outputs.append(out / f"{name}.json")
    save_labeler_specs(specs, out / "labelers.json", train.schema)
    outputs.append(out / "labelers.json")
    write_manifest(out, "synth", dataclasses.asdict(cfg), [], outputs, started)
    print(f"synthetic task: k={cfg.num_classes} d={cfg.feature_dim} labelers={len(specs)} -> {out}")
    return EXIT_OK


def cmd_label(args) -> int:
    started = _now()
    out = _out_dir(args)
    task, inputs = load_task(args.data, args.labelers)
    vm = task.votes
    save_votes(vm, out / "votes.json")
    outputs = [out / "votes.json"]
    cover = vm.coverage_counts() / max(vm.n, 1)
    lines = [f"{'labeler':<20} coverage"]
    lines += [f"{n:<20} {c:.3f}" for n, c in zip(vm.labeler_names, cover)]
    if task.num_classes == 2 and vm.m >= 3:
        est = triplet_accuracies(vm, args.aggregation, strict=False)
        _write(out / "accuracies.json", est.to_json())
        outputs.append(out / "accuracies.json")
        lines[0] += "  estimated-accuracy"
        lines[1:] = [f"{ln}  {a:.3f}" for ln, a in zip(lines[1:], est.accuracy)]
    if args.oracle:
        # diagnostics only: uses training gold labels
        orc = oracle_accuracies(vm, task.train.oracle_labels())
        lines[0] += "  oracle-accuracy"
        lines[1:] = [f"{ln}  {a:.3f}" for ln, a in zip(lines[1:], orc.accuracy)]
    write_manifest(out, "label", {"aggregation": args.aggregation}, inputs, outputs, started)
    print("\n".join(lines))
    return EXIT_OK


def cmd_run(args) -> int:
    started = _now()
    cfg, data, labelers, acc_path = resolve_run(args)
    task, inputs = load_task(data, labelers)
    accuracy, extra = _load_accuracies(acc_path, task)
    out = _out_dir(args)
    with open(out / "metrics.jsonl", "w", encoding="utf-8") as metrics:
        model, report = train_once(cfg, task, accuracy, metrics_stream=metrics)
    _write(out / "report.json", report.to_json())
    save_checkpoint(model, out / "model.json", seed=cfg.seed, epoch=report.selected_epoch)
    outputs = [out / "report.json", out / "model.json", out / "metrics.jsonl"]
    manifest_cfg = {**cfg.to_dict(), "data": str(data), "labelers": labelers, "accuracies": acc_path,
                    "trainRowsUsed": report.num_train_rows, "supervisedRows": report.num_supervised_rows}
    write_manifest(out, "run", manifest_cfg, inputs + extra, outputs, started)
    print(f"{cfg.method} seed={cfg.seed}: test accuracy {report.test_accuracy:.4f} "
          f"(validation {report.validation_accuracy:.4f}, epoch {report.selected_epoch})")
    return EXIT_OK


def _sweep_spec(args) -> SweepSpec:
    return SweepSpec(budget=args.budget, seed=args.sweep_seed)


def cmd_sweep(args) -> int:
    started = _now()
    cfg, data, labelers, acc_path = resolve_run(args)
    task, inputs = load_task(data, labelers)
    accuracy, extra = _load_accuracies(acc_path, task)
    out = _out_dir(args)
    res = sweep(_sweep_spec(args), cfg, task, accuracy, args.jobs)
    outputs = []
    for i, rep in enumerate(res.reports):
        outputs.append(_write(out / "trials" / f"trial_{i:04d}.json", rep.to_json()))
    best = {"index": res.best_index, "config": res.best.to_dict(),
            "validationAccuracy": res.reports[res.best_index].validation_accuracy,
            "testAccuracy": res.reports[res.best_index].test_accuracy}
    outputs.append(_write(out / "best_config.json", json.dumps(best, indent=1, sort_keys=True)))
    write_manifest(out, "sweep", {**cfg.to_dict(), "budget": args.budget, "sweepSeed": args.sweep_seed,
                                  "data": str(data)}, inputs + extra, outputs, started)
    print(f"{len(res.reports)} trials; best #{res.best_index}: validation {best['validationAccuracy']:.4f}, "
          f"test {best['testAccuracy']:.4f}")
    return EXIT_OK


def _parse_seeds(text: str) -> list[int]:
    if "," in text:
        return [int(s) for s in text.split(",") if s.strip()]
    n = int(text)
    return list(range(n))


def cmd_ablate(args) -> int:
    started = _now()
    cfg, data, labelers, acc_path = resolve_run(args)
    task, inputs = load_task(data, labelers)
    accuracy, extra = _load_accuracies(acc_path, task)
    methods = [m.strip() for m in args.methods.split(",") if m.strip()]
    unknown = [m for m in methods if m not in METHODS]
    if unknown:
        raise UsageError(f"unknown method(s) {', '.join(unknown)}; choose from {', '.join(METHODS)}")
    seeds = _parse_seeds(args.seeds)
    for m in methods:
        dataclasses.replace(cfg, method=m).check_task(task.num_classes)
    out = _out_dir(args)
    table = ablation_suite(task, methods, seeds, _sweep_spec(args), cfg, args.per_seed_search, accuracy, args.jobs)
    outputs = [_write(out / "ablation.json", table.to_json()), _write(out / "ablation.txt", table.to_text())]
    write_manifest(out, "ablate", {**cfg.to_dict(), "methods": methods, "seeds": seeds, "budget": args.budget,
                                   "perSeedSearch": args.per_seed_search, "data": str(data)},
                   inputs + extra, outputs, started)
    sys.stdout.write(table.to_text())
    return EXIT_OK


def _collect_records(paths) -> list[dict]:
    files = []
    for p in map(Path, paths):
        if p.is_dir():
            files += sorted(p.rglob("ablation.json")) + sorted(p.rglob("report.json"))
        elif p.is_file():
            files.append(p)
    records, runs = [], {}
    for f in files:
        obj = json.loads(f.read_text(encoding="utf-8"))
        if "rows" in obj and "seeds" in obj:
            for r in obj["rows"]:
                records.append({"task": obj["task"], "method": r["method"], "cell": format_cell(r["mean"], r["std"]),
                                "n": len(r["testAccuracies"])})
        elif "testAccuracy" in obj:
            rep = TrainReport.from_dict(obj)
            runs.setdefault((rep.task, rep.config["method"]), []).append(rep.test_accuracy)
    for (task, method), accs in runs.items():
        std = float(np.std(accs, ddof=1)) if len(accs) > 1 else 0.0
        # single-run reports get their own row so they never overwrite an ablation cell
        records.append({"task": f"{task} (runs)", "method": method, "cell": format_cell(float(np.mean(accs)), std),
                        "n": len(accs)})
    return records


def cmd_report(args) -> int:
    records = _collect_records(args.inputs)
    if not records:
        raise UsageError(f"no reports found under {', '.join(args.inputs)}")
    text = render_table(records, args.format)
    if args.out:
        _write(Path(args.out), text)
    sys.stdout.write(text)
    return EXIT_OK


# ---------------------------------------------------------------------- argument parsing

def _add_run_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="JSON run configuration; flags override its fields")
    p.add_argument("--data", help="data directory with dataset caches")
    p.add_argument("--labelers", help="labeler definition file (defaults to DATA/labelers.json)")
    p.add_argument("--accuracies", help="labeler accuracy JSON used by LoL-a")
    p.add_argument("--method", choices=METHODS)
    p.add_argument("--seed", type=int)
    p.add_argument("--max-train", dest="max_train", type=int)
    p.add_argument("--epochs", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--wd", type=float)
    p.add_argument("--batch-size", dest="batch_size", type=int)
    p.add_argument("--penalty", choices=("none", "square", "linear", "exponential"))
    p.add_argument("--alpha", type=float)
    p.add_argument("--c", type=float)
    p.add_argument("--top-k", dest="top_k", type=int)
    p.add_argument("--smoothing-samples", dest="smoothing_samples", type=int)
    p.add_argument("--smoothing-epsilon", dest="smoothing_epsilon", type=float)
    p.add_argument("--out", required=True, help="output directory")


def _add_sweep_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--budget", type=int, help="number of sampled grid points (default: full grid)")
    p.add_argument("--sweep-seed", dest="sweep_seed", type=int, default=0)
    p.add_argument("--jobs", type=int, default=1)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="lolws", description="Train classifiers from weak labelers.")
    parser.add_argument("--version", action="version", version=f"lolws {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("featurize", help="build dataset caches from a JSONL corpus or a WRENCH directory")
    p.add_argument("--corpus")
    p.add_argument("--val-corpus", dest="val_corpus")
    p.add_argument("--test-corpus", dest="test_corpus")
    p.add_argument("--wrench", help="WRENCH-format directory (train/valid/test.json)")
    p.add_argument("--vocab-limit", dest="vocab_limit", type=int, default=5000)
    p.add_argument("--binarize", action="store_true")
    p.add_argument("--num-classes", dest="num_classes", type=int)
    p.add_argument("--split", default="0.8,0.1,0.1", help="train,validation,test fractions")
    p.add_argument("--val-per-class", dest="val_per_class", type=int)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_featurize)

    p = sub.add_parser("synth", help="generate a synthetic task with keyword labelers")
    p.add_argument("--config", help="JSON overrides for the synthetic generator")
    p.add_argument("--seed", type=int)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("label", help="apply labelers to the training split")
    p.add_argument("--data", required=True)
    p.add_argument("--labelers")
    p.add_argument("--aggregation", choices=("mean", "median"), default="mean")
    p.add_argument("--oracle", action="store_true", help="also print gold-label accuracies (diagnostic)")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_label)

    p = sub.add_parser("run", help="train one model")
    _add_run_flags(p)
    p.set_defaults(func=cmd_run)

    p = sub.add_parser("sweep", help="hyperparameter search on validation accuracy")
    _add_run_flags(p)
    _add_sweep_flags(p)
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("ablate", help="compare methods over several seeds")
    _add_run_flags(p)
    _add_sweep_flags(p)
    p.add_argument("--methods", default="LoL,LoL-simple")
    p.add_argument("--seeds", default="5", help="count N (seeds 0..N-1) or a comma-separated list")
    p.add_argument("--per-seed-search", dest="per_seed_search", action="store_true")
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("report", help="render stored reports as a table")
    p.add_argument("inputs", nargs="+", help="report files or directories to search")
    p.add_argument("--format", choices=("text", "csv"), default="text")
    p.add_argument("--out")
    p.set_defaults(func=cmd_report)
    return parser


def _setup_logging() -> None:
    level = os.environ.get("LOLWS_LOG", "WARNING").upper()
    logging.basicConfig(stream=sys.stderr, level=getattr(logging, level, logging.WARNING),
                        format="%(levelname)s %(name)s: %(message)s")


def main(argv=None) -> int:
    _setup_logging()
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_OK if exc.code == 0 else EXIT_USAGE
    try:
        return args.func(args)
    except UnsupportedTaskError as exc:
        print(f"error: {exc} (triplet label models only exist for two-class tasks)", file=sys.stderr)
        return EXIT_USAGE
    except NumericalError as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL
    except (UsageError, CorpusError, FileNotFoundError, KeyError, ValueError) as exc:
        msg = exc.args[0] if isinstance(exc, KeyError) and exc.args else exc
        print(f"error: {msg}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
