import numpy as np
import pytest
import sympy as sp

from lolws.nnet import (MLP, NumericalError, OptimizerState, StaleCacheError, adam_step, load_checkpoint,
                        save_checkpoint)
from lolws.losses import penalty_terms


def random_net(rng, sizes):
    net = MLP.initialize(sizes, rng, dropout=0.0)
    for b in net.biases:
        b[...] = rng.normal(scale=0.3, size=b.shape)
    return net


def numeric_param_grad(net, f, h=1e-6):
    out = []
    for p in net.params():
        g = np.zeros_like(p)
        for idx in np.ndindex(p.shape):
            old = p[idx]
            p[idx] = old + h
            up = f()
            p[idx] = old - h
            dn = f()
            p[idx] = old
            g[idx] = (up - dn) / (2 * h)
        out.append(g)
    return out


def assert_close_rel(got, want, rtol):
    got = np.concatenate([g.ravel() for g in got])
    want = np.concatenate([w.ravel() for w in want])
    scale = max(np.abs(want).max(), 1e-8)
    assert np.max(np.abs(got - want)) <= rtol * scale, (got, want)


def test_zero_model_is_uniform():
    net = MLP([np.zeros((3, 4)), np.zeros((4, 5))], [np.zeros(4), np.zeros(5)])
    np.testing.assert_allclose(net.predict_proba(np.ones((2, 3))), 0.2)


def test_eval_forward_is_pure_and_normalised():
    rng = np.random.default_rng(0)
    net = MLP.initialize([6, 64, 16, 3], rng)
    X = rng.random((10, 6))
    a, b = net.predict_proba(X), net.predict_proba(X)
    assert np.array_equal(a, b)
    np.testing.assert_allclose(a.sum(axis=1), 1.0, atol=1e-12)


def test_dropout_is_seeded():
    net = MLP.initialize([6, 8, 2], np.random.default_rng(0), dropout=0.5)
    X = np.ones((4, 6))
    a = net.forward(X, train=True, rng=np.random.default_rng(5))[0]
    b = net.forward(X, train=True, rng=np.random.default_rng(5))[0]
    c = net.forward(X, train=True, rng=np.random.default_rng(6))[0]
    assert np.array_equal(a, b) and not np.array_equal(a, c)
    with pytest.raises(ValueError):
        net.forward(X, train=True)


def test_non_finite_input():
    net = MLP.initialize([2, 2], np.random.default_rng(0))
    with pytest.raises(NumericalError):
        net.forward(np.array([[np.nan, 0.0]]))


@pytest.mark.parametrize("trial", range(20))
def test_param_grad_finite_differences(trial):
    rng = np.random.default_rng(100 + trial)
    net = random_net(rng, [5, 4, 3, 3])
    X = rng.normal(size=(3, 5))
    T = rng.dirichlet(np.ones(3), size=3)
    loss = lambda: float(np.sum(T * -np.log(net.predict_proba(X))))
    P, cache = net.forward(X)
    got = net.param_grad(cache, -T / P)
    assert_close_rel(got, numeric_param_grad(net, loss), 1e-4)


def test_param_grad_trivial_cases():
    rng = np.random.default_rng(1)
    net = random_net(rng, [4, 3, 2])
    X = rng.normal(size=(2, 4))
    P, cache = net.forward(X)
    assert all(np.all(g == 0) for g in net.param_grad(cache, np.zeros_like(P)))
    # a constant added to the loss has zero derivative, so only the softmax-invariant shift remains
    a = net.param_grad(cache, np.ones_like(P) * 3.0)
    assert all(np.allclose(g, 0, atol=1e-12) for g in a)


def test_stale_cache():
    rng = np.random.default_rng(2)
    net = random_net(rng, [3, 2])
    P, cache = net.forward(np.ones((1, 3)))
    adam_step(net, OptimizerState.for_model(net, 0.1), [np.ones_like(p) for p in net.params()])
    with pytest.raises(StaleCacheError):
        net.param_grad(cache, np.ones_like(P))


@pytest.mark.parametrize("trial", range(20))
def test_input_grad_finite_differences(trial):
    rng = np.random.default_rng(200 + trial)
    net = random_net(rng, [5, 4, 3, 3])
    x = rng.normal(size=5)
    J = net.input_jacobian(x[None])[0]
    h = 1e-6
    fd = np.zeros_like(J)
    for j in range(5):
        e = np.zeros(5)
        e[j] = h
        fd[:, j] = (net.predict_proba((x + e)[None])[0] - net.predict_proba((x - e)[None])[0]) / (2 * h)
    scale = max(np.abs(fd).max(), 1e-8)
    assert np.max(np.abs(J - fd)) <= 1e-4 * scale
    np.testing.assert_allclose(J.sum(axis=0), 0.0, atol=1e-14)
    np.testing.assert_array_equal(net.input_grad(x, 1), J[1])


def test_input_grad_structural_zero():
    rng = np.random.default_rng(3)
    net = random_net(rng, [4, 5, 2])
    net.weights[0][2, :] = 0.0
    assert np.all(net.input_jacobian(rng.normal(size=(3, 4)))[:, :, 2] == 0.0)
    with pytest.raises(ValueError):
        net.input_grad(np.zeros(4), 2)


def penalty_scalar(net, X, keys, targets, weights, kind):
    """sum_b sum_(j,y) weight * f(max(target - dh_y/dx_j, 0)) with the network's exact Jacobian."""
    J = net.input_jacobian(X)
    total = 0.0
    for (b, y, j), t, w in zip(keys, targets, weights):
        r = max(t - J[b, y, j], 0.0)
        total += w * float(penalty_terms(kind, np.array([r]))[0][0])
    return total


@pytest.mark.parametrize("kind", ["square", "linear", "exponential"])
@pytest.mark.parametrize("trial", range(20))
def test_penalty_param_grad_finite_differences(kind, trial):
    rng = np.random.default_rng(300 + trial)
    sizes = [[5, 4, 3, 3], [5, 6, 3], [5, 2]][trial % 3]
    net = random_net(rng, sizes)
    B, k, d = 3, sizes[-1], sizes[0]
    X = rng.normal(size=(B, d))
    keys = [(int(rng.integers(B)), int(rng.integers(k)), int(rng.integers(d))) for _ in range(6)]
    targets = rng.uniform(0.2, 1.0, size=6)
    weights = rng.uniform(0.5, 1.5, size=6)
    J = net.input_jacobian(X)
    seeds = np.zeros((B, k, d))
    for (b, y, j), t, w in zip(keys, targets, weights):
        r = max(t - J[b, y, j], 0.0)
        seeds[b, y, j] += -w * penalty_terms(kind, np.array([r]))[1][0]
    got = net.penalty_param_grad(X, seeds)
    want = numeric_param_grad(net, lambda: penalty_scalar(net, X, keys, targets, weights, kind), h=1e-5)
    assert_close_rel(got, want, 1e-3)


def test_penalty_param_grad_empty_seeds():
    rng = np.random.default_rng(4)
    net = random_net(rng, [4, 3, 2])
    grads = net.penalty_param_grad(rng.normal(size=(2, 4)), np.zeros((2, 2, 4)))
    assert all(np.all(g == 0) for g in grads)


def test_penalty_param_grad_linear_softmax_symbolic():
    """Closed form for h = softmax(x W + b), derived with sympy independently of the network code."""
    d, k = 3, 2
    xs = sp.symbols(f"x0:{d}")
    Ws = sp.Matrix(d, k, lambda i, j: sp.Symbol(f"w{i}{j}"))
    bs = sp.symbols(f"b0:{k}")
    z = [sum(xs[i] * Ws[i, c] for i in range(d)) + bs[c] for c in range(k)]
    den = sum(sp.exp(zc) for zc in z)
    h = [sp.exp(zc) / den for zc in z]
    S = sp.Matrix(k, d, lambda y, j: sp.Symbol(f"s{y}{j}"))
    Q = sum(S[y, j] * sp.diff(h[y], xs[j]) for y in range(k) for j in range(d))

    rng = np.random.default_rng(5)
    W = rng.normal(size=(d, k))
    b = rng.normal(size=k)
    x = rng.normal(size=d)
    seeds = rng.normal(size=(k, d))
    subs = {**{xs[i]: x[i] for i in range(d)}, **{bs[c]: b[c] for c in range(k)},
            **{Ws[i, c]: W[i, c] for i in range(d) for c in range(k)},
            **{S[y, j]: seeds[y, j] for y in range(k) for j in range(d)}}
    want_W = np.array([[float(sp.diff(Q, Ws[i, c]).subs(subs)) for c in range(k)] for i in range(d)])
    want_b = np.array([float(sp.diff(Q, bs[c]).subs(subs)) for c in range(k)])

    net = MLP([W], [b], dropout=0.0)
    gW, gb = net.penalty_param_grad(x[None], seeds[None])
    np.testing.assert_allclose(gW, want_W, rtol=1e-10, atol=1e-12)
    np.testing.assert_allclose(gb, want_b, rtol=1e-10, atol=1e-12)


def test_adam_zero_gradient_no_decay():
    net = MLP.initialize([3, 2], np.random.default_rng(0))
    before = [p.copy() for p in net.params()]
    adam_step(net, OptimizerState.for_model(net, 0.01), net.zero_grad())
    assert all(np.array_equal(a, b) for a, b in zip(before, net.params()))


def test_adam_first_step_is_sign_step():
    net = MLP.initialize([3, 2], np.random.default_rng(0))
    before = [p.copy() for p in net.params()]
    g = [np.random.default_rng(1).normal(size=p.shape) for p in net.params()]
    adam_step(net, OptimizerState.for_model(net, 0.001), g)
    for a, b, gi in zip(before, net.params(), g):
        np.testing.assert_allclose(b - a, -0.001 * np.sign(gi), rtol=1e-5)


def test_adam_decoupled_weight_decay():
    net = MLP.initialize([3, 2], np.random.default_rng(0))
    before = [p.copy() for p in net.params()]
    adam_step(net, OptimizerState.for_model(net, 0.001, 0.01), net.zero_grad())
    for a, b in zip(before, net.params()):
        np.testing.assert_allclose(b, a * 0.99999, rtol=1e-15)


def test_adam_rejects_bad_gradients():
    net = MLP.initialize([3, 2], np.random.default_rng(0))
    st = OptimizerState.for_model(net, 0.01)
    bad = net.zero_grad()
    bad[0][0, 0] = np.inf
    with pytest.raises(NumericalError):
        adam_step(net, st, bad)
    with pytest.raises(ValueError):
        adam_step(net, st, [np.zeros(1)])


def test_checkpoint_roundtrip(tmp_path):
    net = MLP.initialize([7, 5, 3], np.random.default_rng(9), dropout=0.3)
    save_checkpoint(net, tmp_path / "m.json", seed=4, epoch=2)
    back = load_checkpoint(tmp_path / "m.json")
    assert back.layer_sizes == [7, 5, 3] and back.dropout == 0.3
    for a, b in zip(net.params(), back.params()):
        assert np.array_equal(a, b)
