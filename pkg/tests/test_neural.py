import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from plmnet.acceptance import gradient_check, random_small_net
from plmnet.neural import (Adam, CheckpointError, FrozenError, MlpNet, load_checkpoint, mse,
                           refit_output_layer, save_checkpoint)


@given(st.integers(0, 2**31 - 1))
def test_gradients_match_finite_differences(seed):
    net, x = random_small_net(np.random.default_rng(seed))
    assert gradient_check(net, x) < 1e-4


def test_gradient_check_detects_a_broken_backward():
    net, x = random_small_net(np.random.default_rng(3))
    original = net.backward

    def broken(cache, g):
        grads, gin = original(cache, g)
        grads[0] = grads[0] * 1.01 + 0.01
        return grads, gin
    net.backward = broken
    assert gradient_check(net, x) > 1e-4


def test_eval_mode_is_deterministic_and_train_mode_drops():
    net = MlpNet([4, 50, 1], dropout=[0.5, 0.0], seed=1)
    x = np.ones((3, 4))
    assert np.array_equal(net.eval()(x), net(x))
    net.train()
    _, (cache, _) = net.forward(x)
    mask = cache[0][2]
    assert mask is not None and np.any(mask == 0)
    assert set(np.unique(mask)) <= {0.0, 2.0}
    assert cache[1][2] is None


def test_inverted_dropout_preserves_mean():
    net = MlpNet([1, 1], ["identity"], [0.3], seed=0)
    net.layers[0].weights[:] = 1.0
    x = np.ones((200_000, 1))
    assert net.train()(x).mean() == pytest.approx(1.0, abs=0.01)


def test_adam_minimizes_quadratic():
    net = MlpNet([2, 1], ["identity"], seed=0)
    opt = Adam([net], lr=0.05)
    x = np.random.default_rng(0).normal(size=(64, 2))
    y = x @ np.array([[2.0], [-1.0]]) + 0.5
    for _ in range(800):
        out, cache = net.forward(x)
        _, g = mse(out, y)
        opt.step(net.backward(cache, g)[0])
    assert net.layers[0].weights[:, 0] == pytest.approx([2.0, -1.0], abs=1e-3)
    assert net.layers[0].biases[0] == pytest.approx(0.5, abs=1e-3)


def test_adam_matches_textbook_update():
    net = MlpNet([3, 2], ["identity"], seed=4)
    ref = [p.copy() for p in net.params()]
    m = [np.zeros_like(p) for p in ref]
    v = [np.zeros_like(p) for p in ref]
    opt = Adam([net], lr=0.01)
    rng = np.random.default_rng(0)
    for t in range(1, 6):
        grads = [rng.normal(size=p.shape) for p in ref]
        opt.step(grads)
        for i, g in enumerate(grads):
            m[i] = 0.9 * m[i] + 0.1 * g
            v[i] = 0.999 * v[i] + 0.001 * g * g
            ref[i] -= 0.01 * (m[i] / (1 - 0.9 ** t)) / (np.sqrt(v[i] / (1 - 0.999 ** t)) + 1e-8)
    for p, r in zip(net.params(), ref):
        assert np.allclose(p, r, rtol=1e-12, atol=1e-14)


def test_frozen_net_rejects_optimizer():
    net = MlpNet([2, 1])
    net.freeze()
    with pytest.raises(FrozenError):
        Adam([net])
    other = MlpNet([2, 1])
    opt = Adam([other])
    other.freeze()
    with pytest.raises(FrozenError):
        opt.step([np.zeros_like(p) for p in other.params()])


def test_refit_recovers_affine_map():
    rng = np.random.default_rng(0)
    net = MlpNet([3, 5, 2], seed=0)
    h = rng.normal(size=(100, 5))
    w_true, b_true = rng.normal(size=(5, 2)), rng.normal(size=2)
    w, b = refit_output_layer(net, h, h @ w_true + b_true, ridge=0.0)
    assert np.allclose(w, w_true) and np.allclose(b, b_true)


def test_checkpoint_roundtrip_and_tamper(tmp_path):
    net = MlpNet([3, 4, 1], dropout=[0.3, 0.0], seed=2)
    digest = save_checkpoint(tmp_path / "n.npz", {"a": net}, {"note": 1})
    nets, meta = load_checkpoint(tmp_path / "n.npz")
    assert meta == {"note": 1}
    assert all(np.array_equal(p, q) for p, q in zip(nets["a"].params(), net.params()))
    assert nets["a"].spec() == net.spec()
    data = dict(np.load(tmp_path / "n.npz"))
    data["a/0/W"] = data["a/0/W"] + 1.0
    np.savez(tmp_path / "bad.npz", **data)
    with pytest.raises(CheckpointError):
        load_checkpoint(tmp_path / "bad.npz")
    assert len(digest) == 64


def test_input_width_checked():
    with pytest.raises(ValueError):
        MlpNet([3, 1])(np.ones(4))


def test_dropout_is_unbiased_in_expectation():
    net = MlpNet([3, 8, 8, 1], dropout=[0.3, 0.3, 0.0], seed=5)
    x = np.array([0.3, -0.7, 1.1])
    # eval output equals the mask-average of the train output when dropout is the last nonlinearity
    # before an affine map; check the final affine stage on fixed hidden inputs
    head = MlpNet([8, 1], ["identity"], [0.0], seed=1)
    h = np.abs(np.random.default_rng(0).normal(size=8))
    drop = MlpNet([8, 8], ["identity"], [0.3], seed=2)
    drop.layers[0].weights[:] = np.eye(8)
    samples = head(drop.train()(np.tile(h, (10_000, 1))))[:, 0]
    expect = head(drop.eval()(h))[0]
    assert abs(samples.mean() - expect) < 3 * samples.std() / np.sqrt(len(samples))
    assert np.array_equal(net.eval()(x), net.eval()(x))


def test_linear_gradient_closed_form():
    rng = np.random.default_rng(1)
    net = MlpNet([4, 1], ["identity"], seed=0)
    x, y = rng.normal(size=(16, 4)), rng.normal(size=(16, 1))
    out, cache = net.forward(x)
    _, g = mse(out, y)
    grads, _ = net.backward(cache, g)
    w = net.layers[0].weights
    assert np.allclose(grads[0], 2 * x.T @ (x @ w - y) / 16)


def test_adam_first_step_and_zero_gradient():
    net = MlpNet([2, 2], ["identity"], seed=0)
    before = [p.copy() for p in net.params()]
    opt = Adam([net], lr=0.001)
    grads = [np.full_like(p, 3.0) * np.sign(np.arange(p.size).reshape(p.shape) % 2 - 0.5) for p in before]
    opt.step(grads)
    for p, q, g in zip(net.params(), before, grads):
        assert np.allclose(p - q, -0.001 * np.sign(g), rtol=1e-6)
    after = [p.copy() for p in net.params()]
    m_before = [m.copy() for m in opt.m]
    opt.step([np.zeros_like(p) for p in after])
    # zero gradient still moves along the decayed momentum; moments decay by beta
    assert all(np.allclose(m, 0.9 * mb) for m, mb in zip(opt.m, m_before))


def test_zero_output_gradient_gives_zero_gradients():
    net, x = random_small_net(np.random.default_rng(9))
    out, cache = net.forward(x)
    grads, gin = net.backward(cache, np.zeros_like(out))
    assert all(not np.any(g) for g in grads) and not np.any(gin)


def test_unfrozen_copy_changes_hash():
    from plmnet.neural import params_hash
    net = MlpNet([2, 3, 1], seed=0)
    net.freeze()
    other = net.copy()
    opt = Adam([other])
    opt.step([np.ones_like(p) for p in other.params()])
    assert params_hash({"n": net}) != params_hash({"n": other})
