import itertools

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from lolws import ABSTAIN
from lolws.data import TaskSchema
from lolws.labelers import (LabelerSpec, VoteMatrix, apply_labelers, gradient_table, load_labeler_specs,
                            non_abstain_count, save_labeler_specs, smoothed_gradient, smoothed_jacobian,
                            smoothed_value)


def brute_force_expectation(spec, phi, k):
    """E_{x ~ Ber(phi)}[onehot(lambda(x))] by enumerating the labeler's support."""
    supp = spec.support
    out = np.zeros(k + 1)
    for bits in itertools.product((0, 1), repeat=len(supp)):
        x = np.zeros(len(phi))
        x[supp] = bits
        p = np.prod([phi[j] if b else 1 - phi[j] for j, b in zip(supp, bits)])
        v = spec.vote(x)[0]
        out[k if v == ABSTAIN else v] += p
    return out


def test_keyword_vote_and_abstain():
    spec = LabelerSpec.keyword("kw", [2], 1)
    vm = apply_labelers([spec], np.array([[0, 0, 1.0], [1, 1, 0]]), 2)
    assert vm.votes[:, 0].tolist() == [1, ABSTAIN]


def test_or_rule_votes_once():
    spec = LabelerSpec.keyword("kw", [0, 1], 0)
    vm = apply_labelers([spec], np.array([[1.0, 1.0, 0]]), 2)
    assert vm.votes.tolist() == [[0]]


def test_zero_linear_labeler_always_abstains():
    spec = LabelerSpec.linear("lin", np.zeros(3), 0.0, (0, 1), abstain_band=0.1)
    vm = apply_labelers([spec], np.random.default_rng(0).random((5, 3)), 2)
    assert (vm.votes == ABSTAIN).all()


def test_linear_vote_by_sign():
    spec = LabelerSpec.linear("lin", [1.0, -1.0], 0.0, (0, 1), abstain_band=0.5)
    vm = apply_labelers([spec], np.array([[1, 0], [0, 1], [1, 1], [0, 0.0]]), 2)
    assert vm.votes[:, 0].tolist() == [1, 0, ABSTAIN, ABSTAIN]


def test_spec_validation():
    with pytest.raises(ValueError):
        LabelerSpec.keyword("e", [], 0)
    with pytest.raises(ValueError):
        apply_labelers([LabelerSpec.keyword("a", [5], 0)], np.zeros((1, 3)), 2)
    with pytest.raises(ValueError):
        apply_labelers([LabelerSpec.keyword("a", [0], 2)], np.zeros((1, 3)), 2)


def test_single_keyword_smoothed_value_and_gradient():
    spec = LabelerSpec.keyword("kw", [0], 1)
    np.testing.assert_allclose(smoothed_value(spec, [0.3], 2), [0.0, 0.3, 0.7])
    np.testing.assert_allclose(smoothed_value(spec, [0.0], 2), [0.0, 0.0, 1.0])
    np.testing.assert_array_equal(smoothed_jacobian(spec, [0.3], 2)[:, 0], [0.0, 1.0, -1.0])
    assert smoothed_gradient(spec, [0.3], 2).entries == {(0, 1): 1.0}


def test_two_keywords():
    spec = LabelerSpec.keyword("kw", [0, 1], 1)
    assert smoothed_value(spec, [0.5, 0.5], 2)[1] == pytest.approx(0.75)
    assert smoothed_gradient(spec, [0.2, 0.5], 2).entries[(0, 1)] == pytest.approx(0.5)
    assert smoothed_gradient(spec, [0.2, 1.0], 2).entries[(0, 1)] == 0.0


def test_phi_outside_unit_interval():
    spec = LabelerSpec.keyword("kw", [0], 1)
    with pytest.raises(ValueError):
        smoothed_value(spec, [1.5], 2)
    with pytest.raises(ValueError):
        smoothed_gradient(spec, [-0.1], 2)


def test_finite_difference_matches_gradient():
    rng = np.random.default_rng(0)
    spec = LabelerSpec.keyword("kw", [0, 2, 3], 1)
    phi = rng.uniform(0.05, 0.95, 5)
    g = smoothed_gradient(spec, phi, 2).entries
    h = 1e-6
    for j in (0, 2, 3):
        up, dn = phi.copy(), phi.copy()
        up[j] += h
        dn[j] -= h
        fd = (smoothed_value(spec, up, 2) - smoothed_value(spec, dn, 2)) / (2 * h)
        assert fd[1] == pytest.approx(g[(j, 1)], rel=1e-6)
        assert fd[2] == pytest.approx(-g[(j, 1)], rel=1e-6)


@settings(max_examples=50, deadline=None)
@given(st.lists(st.floats(0.0, 1.0), min_size=1, max_size=6), st.integers(0, 2))
def test_smoothed_value_normalised_and_matches_brute_force(phi, cls):
    phi = np.array(phi)
    spec = LabelerSpec.keyword("kw", range(len(phi)), cls)
    v = smoothed_value(spec, phi, 3)
    assert v.sum() == pytest.approx(1.0, abs=1e-12)
    np.testing.assert_allclose(v, brute_force_expectation(spec, phi, 3), atol=1e-12)


@settings(max_examples=30, deadline=None)
@given(st.lists(st.sampled_from([0.0, 1.0]), min_size=3, max_size=3))
def test_smoothed_value_at_binary_point_is_one_hot_vote(x):
    x = np.array(x)
    spec = LabelerSpec.keyword("kw", [0, 2], 1)
    v = smoothed_value(spec, x, 2)
    vote = spec.vote(x)[0]
    expected = np.zeros(3)
    expected[2 if vote == ABSTAIN else vote] = 1.0
    np.testing.assert_array_equal(v, expected)


@settings(max_examples=30, deadline=None)
@given(st.lists(st.floats(0.01, 0.99), min_size=2, max_size=5), st.integers(0, 4))
def test_gradient_finite_difference_property(phi, j):
    phi = np.array(phi)
    j = j % len(phi)
    spec = LabelerSpec.keyword("kw", range(len(phi)), 0)
    g = smoothed_gradient(spec, phi, 2).entries[(j, 0)]
    h = 1e-6
    up, dn = phi.copy(), phi.copy()
    up[j] += h
    dn[j] -= h
    fd = (smoothed_value(spec, up, 2)[0] - smoothed_value(spec, dn, 2)[0]) / (2 * h)
    assert fd == pytest.approx(g, rel=1e-6, abs=1e-10)


def test_monte_carlo_matches_closed_form():
    rng = np.random.default_rng(1)
    spec = LabelerSpec.keyword("kw", [0, 1, 2], 1)
    phi = np.array([0.2, 0.1, 0.3, 0.9])
    X = (rng.random((100_000, 4)) < phi).astype(float)
    votes = spec.vote(X)
    mc = np.array([np.mean(votes == 0), np.mean(votes == 1), np.mean(votes == ABSTAIN)])
    np.testing.assert_allclose(mc, smoothed_value(spec, phi, 2), atol=0.01)


def test_linear_smoothed_value_by_enumeration():
    spec = LabelerSpec.linear("lin", [1.0, -1.0, 0.0], 0.0, (0, 1), abstain_band=0.5)
    phi = np.array([0.3, 0.6, 0.5])
    v = smoothed_value(spec, phi, 2)
    np.testing.assert_allclose(v, [0.6 * 0.7, 0.3 * 0.4, 0.3 * 0.6 + 0.7 * 0.4])
    assert smoothed_gradient(spec, np.array([1.0, 0.0, 0.0]), 2).entries == {(0, 1): 1.0, (1, 1): -1.0}


def test_linear_top_k_mask():
    spec = LabelerSpec.linear("lin", [0.1, -3.0, 2.0, 0.5], 1.0, (0, 1))
    g = smoothed_gradient(spec, np.array([1.0, 0.0, 1.0, 0.0]), 2, top_k=2)
    assert g.entries == {(1, 1): -3.0, (2, 1): 2.0}


def test_gradient_table_matches_per_example_gradients():
    rng = np.random.default_rng(3)
    specs = [LabelerSpec.keyword("a", [0, 1], 1), LabelerSpec.keyword("b", [2], 0),
             LabelerSpec.linear("c", [0, 0, 1.0, -1.0], 0.0, (0, 1), 0.5)]
    X = (rng.random((30, 4)) < 0.5).astype(float)
    vm = apply_labelers(specs, X, 2)
    table = gradient_table(specs, X, vm.votes)
    got = {}
    for r, i, j, y, v in zip(table.row, table.labeler, table.feature, table.cls, table.value):
        got[(r, i, j, y)] = v
    want = {}
    for r in range(30):
        for i, s in enumerate(specs):
            if vm.votes[r, i] == ABSTAIN:
                continue
            for (j, y), v in smoothed_gradient(s, X[r], 2).entries.items():
                want[(r, i, j, y)] = v
    assert got == want
    sub = table.select_rows(np.array([5, 2]))
    assert set(sub.row.tolist()) <= {0, 1}
    assert len(sub) == sum(1 for key in want if key[0] in (5, 2))


def test_opaque_labeler_contributes_no_entries():
    spec = LabelerSpec.keyword("a", [0], 1)
    votes = np.array([[1, 0], [ABSTAIN, 1]])
    table = gradient_table([spec, None], np.array([[1.0, 0.0], [0.0, 1.0]]), votes)
    assert table.labeler.tolist() == [0]


@pytest.mark.parametrize("row,expected", [([1, ABSTAIN, 0], 2), ([ABSTAIN, ABSTAIN, ABSTAIN], 0), ([1, 0, 1, 1, 0], 5)])
def test_non_abstain_count(row, expected):
    vm = VoteMatrix(np.array([row]), tuple(f"l{i}" for i in range(len(row))), 2)
    assert non_abstain_count(vm, 0) == expected


def test_spec_file_roundtrip(tmp_path):
    schema = TaskSchema.simple(2, 4, ["good", "bad", "food", "meh"])
    specs = [LabelerSpec.keyword("pos", [0, 2], 1),
             LabelerSpec.linear("lin", [0, 1.0, 0, -2.0], 0.5, (1, 0), 0.1)]
    save_labeler_specs(specs, tmp_path / "l.json", schema)
    back = load_labeler_specs(tmp_path / "l.json", schema)
    assert back[0].keyword_indices == (0, 2) and back[0].voted_class == 1
    np.testing.assert_array_equal(back[1].weights, specs[1].weights)
    assert back[1].class_mapping == (1, 0) and back[1].abstain_band == 0.1
