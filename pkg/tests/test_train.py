import dataclasses

import numpy as np
import pytest
import scipy.sparse as sp

from lolws import ABSTAIN
from lolws.data import Dataset, SyntheticTaskConfig, TaskSchema, generate_synthetic
from lolws.labelers import LabelerSpec, VoteMatrix
from lolws.labelmodels import UnsupportedTaskError
from lolws.losses import LossConfig
from lolws.nnet import MLP
from lolws.train import (AblationTable, EmptyTrainingSetError, RunConfig, SweepSpec, TrainReport, WeakTask,
                         ablation_suite, evaluate, render_table, sweep, train_once)

SMALL = dict(num_train=300, num_validation=100, num_test=200, feature_dim=80, signal_per_class=5)


@pytest.fixture(scope="module")
def small_task():
    tr, va, te, specs = generate_synthetic(SyntheticTaskConfig(seed=1, **SMALL))
    return WeakTask.from_specs(tr, va, te, specs, "small")


def quick(method, **kw):
    base = dict(method=method, epochs=3, learning_rate=0.01, seed=2)
    base.update(kw)
    return RunConfig(**base)


@pytest.mark.parametrize("method", ["LoL", "LoL-simple", "LoL-c", "LoL-a", "MV", "SoftMV", "T-Mean", "T-Median"])
def test_every_method_learns_separable_task(method):
    cfg = SyntheticTaskConfig(accuracy=1.0, coverage=1.0, num_labelers=4, signal_per_class=2, seed=7,
                              num_train=400, num_validation=100, num_test=200, feature_dim=40)
    tr, va, te, specs = generate_synthetic(cfg)
    task = WeakTask.from_specs(tr, va, te, specs)
    _, report = train_once(RunConfig(method=method, learning_rate=0.01, seed=0), task)
    assert report.test_accuracy >= 0.95


def test_train_is_deterministic(small_task):
    a = train_once(quick("LoL"), small_task)
    b = train_once(quick("LoL"), small_task)
    assert a[1].to_json() == b[1].to_json()
    assert a[1].batch_losses == b[1].batch_losses
    for p, q in zip(a[0].params(), b[0].params()):
        assert np.array_equal(p, q)


def test_selected_epoch_is_earliest_best(small_task):
    _, rep = train_once(quick("SoftMV", epochs=6), small_task)
    accs = [e["validationAccuracy"] for e in rep.epochs]
    assert rep.selected_epoch == accs.index(max(accs)) + 1
    assert rep.validation_accuracy == max(accs)


def test_returned_model_is_best_checkpoint(small_task):
    model, rep = train_once(quick("LoL-simple", epochs=5), small_task)
    assert evaluate(model, small_task.validation)[0] == rep.validation_accuracy
    assert evaluate(model, small_task.test)[0] == rep.test_accuracy


def test_zero_alpha_lol_matches_lol_simple(small_task):
    cfg = quick("LoL", loss=LossConfig(alpha=0.0, c=3.0))
    a = train_once(cfg, small_task)
    b = train_once(quick("LoL-simple"), small_task)
    assert a[1].batch_losses == b[1].batch_losses
    for p, q in zip(a[0].params(), b[0].params()):
        assert np.array_equal(p, q)


def test_soft_mv_and_lol_simple_share_batch_losses(small_task):
    _, a = train_once(quick("SoftMV"), small_task)
    _, b = train_once(quick("LoL-simple"), small_task)
    np.testing.assert_allclose(a.batch_losses, b.batch_losses, atol=1e-12, rtol=0)


def test_max_train_truncation(small_task):
    _, rep = train_once(quick("LoL-simple", max_train=100, epochs=1), small_task)
    assert rep.num_train_rows == 100
    assert rep.num_supervised_rows <= 100


def test_empty_training_set():
    schema = TaskSchema.simple(2, 3)
    X = sp.csr_matrix(np.eye(3))
    tr = Dataset(schema, X, "train")
    va = Dataset(schema, X, "validation", np.array([0, 1, 0]))
    votes = VoteMatrix(np.full((3, 2), ABSTAIN), ("a", "b"), 2)
    task = WeakTask(tr, va, va, votes, [None, None])
    with pytest.raises(EmptyTrainingSetError):
        train_once(RunConfig(method="LoL-simple", epochs=1), task)


def test_binary_only_methods_refuse_multiclass():
    cfg = SyntheticTaskConfig(num_classes=4, accuracy=0.9, coverage=0.2, seed=3, **SMALL)
    task = WeakTask.from_specs(*generate_synthetic(cfg))
    with pytest.raises(UnsupportedTaskError, match="binary"):
        train_once(RunConfig(method="T-Mean", epochs=1), task)


def test_accuracy_weighting_falls_back_on_multiclass(caplog):
    cfg = SyntheticTaskConfig(num_classes=3, accuracy=0.9, coverage=0.2, seed=3, **SMALL)
    task = WeakTask.from_specs(*generate_synthetic(cfg))
    _, rep = train_once(RunConfig(method="LoL-a", epochs=1), task)
    assert "uniform" in caplog.text
    assert 0.0 <= rep.test_accuracy <= 1.0


def test_evaluate_oracle_and_tie_rule():
    schema = TaskSchema.simple(2, 2)
    X = np.array([[1.0, 0.0], [0.0, 1.0]] * 5)
    y = np.array([0, 1] * 5)
    ds = Dataset(schema, X, "test", y)
    oracle = MLP([np.array([[50.0, -50.0], [-50.0, 50.0]])], [np.zeros(2)])
    acc, conf = evaluate(oracle, ds)
    assert acc == 1.0 and conf.sum() == len(ds)
    flat = MLP([np.zeros((2, 2))], [np.zeros(2)])
    acc, conf = evaluate(flat, ds)
    assert acc == 0.5 and conf[:, 1].sum() == 0


def test_sweep_full_grid_size_and_argmax(small_task):
    spec = SweepSpec(learning_rates=(0.1, 0.01), weight_decays=(0.0, 0.01))
    res = sweep(spec, quick("LoL-simple", epochs=1), small_task)
    assert len(res.reports) == 4
    best = res.reports[res.best_index].validation_accuracy
    assert all(best >= r.validation_accuracy for r in res.reports)
    again = sweep(spec, quick("LoL-simple", epochs=1), small_task)
    assert again.best_index == res.best_index


def test_default_grid_sizes():
    assert len(SweepSpec().configs(RunConfig(method="LoL-simple"))) == 12
    assert len(SweepSpec().configs(RunConfig(method="LoL"))) == 4 * 3 * 6 * 5
    picked = SweepSpec(budget=20).configs(RunConfig(method="LoL"))
    assert len(picked) == 20 and picked == SweepSpec(budget=20).configs(RunConfig(method="LoL"))
    with pytest.raises(ValueError):
        SweepSpec(budget=0)
    with pytest.raises(ValueError):
        SweepSpec(alphas=())


def test_tie_break_prefers_lower_alpha_then_lr():
    from lolws.train import _selection_key

    def rep(alpha, lr, val=0.8, epoch=3):
        cfg = RunConfig(method="LoL", learning_rate=lr, loss=LossConfig(alpha=alpha)).to_dict()
        return TrainReport(cfg, [], epoch, val, 0.0, [], 1, 1)

    reps = [rep(0.1, 0.01), rep(0.001, 0.1), rep(0.001, 0.01), rep(0.1, 0.001, epoch=2)]
    best = min(range(4), key=lambda i: _selection_key(reps[i], i))
    assert best == 3  # earlier epoch wins first
    best = min(range(3), key=lambda i: _selection_key(reps[i], i))
    assert best == 2


def test_ablation_suite_shape_and_determinism(small_task):
    spec = SweepSpec(learning_rates=(0.01,), weight_decays=(0.0,), cs=(1.0,), alphas=(0.01,))
    tmpl = RunConfig(epochs=2)
    a = ablation_suite(small_task, ["LoL", "MV"], [0, 1, 2], spec, tmpl)
    b = ablation_suite(small_task, ["LoL", "MV"], [0, 1, 2], spec, tmpl)
    assert a.to_json() == b.to_json()
    assert [r.method for r in a.rows] == ["LoL", "MV"]
    row = a.row("LoL")
    assert len(row.test_accuracies) == 3
    assert row.std == pytest.approx(np.std(row.test_accuracies, ddof=1))
    with pytest.raises(ValueError):
        ablation_suite(small_task, ["LoL"], [0], spec, tmpl)
    assert "±" in a.to_text()


def test_render_table_formats():
    recs = [{"task": "t", "method": "LoL", "cell": "90.0 ± 1.0"}, {"task": "t", "method": "MV", "cell": "80.0 ± 2.0"}]
    assert render_table(recs, "csv") == "task,LoL,MV\nt,90.0 ± 1.0,80.0 ± 2.0\n"
    text = render_table(recs)
    assert text.splitlines()[0].split("|")[1].strip() == "LoL"


def test_run_config_roundtrip_and_validation():
    cfg = RunConfig(method="LoL-c", loss=LossConfig(alpha=0.1), max_train=100, seed=4)
    assert RunConfig.from_dict(cfg.to_dict()) == cfg
    with pytest.raises(ValueError):
        RunConfig(method="Snorkel")
    with pytest.raises(ValueError):
        RunConfig(max_train=0)
    assert dataclasses.replace(cfg, method="LoL-simple").effective_loss().penalty == "none"
    assert cfg.effective_loss().weighting == "coverage"


def test_opaque_labelers_train_without_penalty(small_task):
    task = WeakTask(small_task.train, small_task.validation, small_task.test, small_task.votes,
                    [None] * small_task.votes.m)
    _, rep = train_once(quick("LoL", epochs=1), task)
    assert all(e["penaltyLoss"] == 0.0 for e in rep.epochs)


def test_ablation_table_json_roundtrip_fields(small_task):
    spec = SweepSpec(learning_rates=(0.01,), weight_decays=(0.0,))
    t = ablation_suite(small_task, ["SoftMV"], [0, 1], spec, RunConfig(epochs=1))
    assert isinstance(t, AblationTable)
    d = t.to_dict()
    assert d["seeds"] == [0, 1] and d["rows"][0]["method"] == "SoftMV"
