import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays

from recem import tensor as T
from recem.nn import (Linear, SgdState, binary_cross_entropy, clip_grad_norm, grl, init_params,
                      linear_forward, nll_from_probs, philox, sgd_step, softmax_cross_entropy)
from recem.tensor import ShapeError, Tensor, grad_check


def test_philox_streams_are_reproducible_and_distinct():
    a = philox(3, "layer", 1).random(5)
    assert np.array_equal(a, philox(3, "layer", 1).random(5))
    assert not np.array_equal(a, philox(3, "layer", 2).random(5))
    assert not np.array_equal(a, philox(4, "layer", 1).random(5))


def test_linear_identity_and_bias_only():
    layer = Linear(3, 3)
    layer.weight.data = np.eye(3)
    x = Tensor(np.arange(6.0).reshape(2, 3))
    assert np.array_equal(layer(x).data, x.data)
    layer.weight.data = np.zeros((3, 3))
    layer.bias.data = np.array([[1.0, -2.0, 0.5]])
    assert np.array_equal(linear_forward(layer, x).data, np.tile([1.0, -2.0, 0.5], (2, 1)))
    with pytest.raises(ShapeError):
        layer(Tensor(np.ones((2, 4))))


def test_linear_grad_check():
    layer = Linear(5, 3, seed=1)
    layer.bias.data = np.random.default_rng(0).normal(size=(1, 3))
    x = np.random.default_rng(1).normal(size=(4, 5))
    assert grad_check(lambda t: T.sigmoid(layer(t)).sum(), x) <= 1e-4
    w0 = layer.weight.data.copy()

    def through_weight(w):
        layer.weight = w
        return T.sigmoid(layer(Tensor(x))).sum()

    assert grad_check(through_weight, w0) <= 1e-4


def test_init_is_seeded_and_bounded():
    a, b, c = Linear(64, 32, 5, "f"), Linear(64, 32, 5, "f"), Linear(64, 32, 6, "f")
    assert np.array_equal(a.weight.data, b.weight.data)
    assert not np.array_equal(a.weight.data, c.weight.data)
    assert np.all(np.abs(a.weight.data) <= math.sqrt(1 / 64)) and np.all(a.bias.data == 0)
    init_params(a, 6)
    assert np.array_equal(a.weight.data, c.weight.data)


def test_init_variance_matches_uniform_moment():
    layer = Linear(64, 160, seed=9)  # 10240 draws
    expected = (1 / 3) * (1 / 64)
    assert abs(layer.weight.data.var() / expected - 1) < 0.2


# -- GRL ------------------------------------------------------------------------------


def test_grl_forward_identity_and_backward_examples():
    x = Tensor([1.0, 2.0, 3.0], requires_grad=True)
    assert grl(x, 7.0).data.tolist() == [1, 2, 3]
    y = Tensor([0.5, 0.5], requires_grad=True)
    grl(y, 1.0).sum().backward()
    assert y.grad.tolist() == [-1, -1]
    z = Tensor([0.5, 0.5], requires_grad=True)
    grl(z, 0.0).sum().backward()
    assert z.grad.tolist() == [0, 0]
    with pytest.raises(ValueError):
        grl(z, -0.1)


@pytest.mark.parametrize("lam", [0.0, 0.5, 1.0, 2.0])
def test_grl_exact_reversal_through_classifier(lam):
    rng = np.random.default_rng(int(lam * 10))
    head = Linear(6, 4, seed=2)
    x0, y = rng.normal(size=(5, 6)), rng.integers(0, 4, 5)
    plain = Tensor(x0, requires_grad=True)
    softmax_cross_entropy(head(plain), y).backward()
    rev = Tensor(x0, requires_grad=True)
    softmax_cross_entropy(head(grl(rev, lam)), y).backward()
    assert np.array_equal(rev.grad, -lam * plain.grad)


# -- losses ---------------------------------------------------------------------------


def test_cross_entropy_examples():
    assert softmax_cross_entropy(Tensor(np.zeros((3, 4))), [0, 1, 3]).item() == pytest.approx(math.log(4), abs=1e-12)
    logits = np.zeros((1, 3))
    logits[0, 2] = 50.0
    assert softmax_cross_entropy(Tensor(logits), [2]).item() < 1e-20
    with pytest.raises(ValueError):
        softmax_cross_entropy(Tensor(np.zeros((2, 3))), [0, 3])


def test_cross_entropy_matches_direct_formula():
    rng = np.random.default_rng(4)
    z, y = rng.normal(size=(20, 5)) * 3, rng.integers(0, 5, 20)
    direct = np.mean([-z[i, y[i]] + math.log(sum(math.exp(v) for v in z[i])) for i in range(20)])
    assert softmax_cross_entropy(Tensor(z), y).item() == pytest.approx(direct, rel=1e-12)
    p = np.exp(z) / np.exp(z).sum(1, keepdims=True)
    assert nll_from_probs(Tensor(p), y).item() == pytest.approx(direct, rel=1e-10)


def test_cross_entropy_gradient():
    rng = np.random.default_rng(5)
    y = rng.integers(0, 4, 6)
    assert grad_check(lambda t: softmax_cross_entropy(t, y), rng.normal(size=(6, 4))) <= 1e-4


def test_bce_examples_and_oracle():
    t = np.array([[0, 1, 1], [1, 0, 0]], dtype=float)
    assert binary_cross_entropy(Tensor(np.full((2, 3), 0.5)), t).item() == pytest.approx(math.log(2), abs=1e-12)
    assert binary_cross_entropy(Tensor(t), t).item() <= 1e-6
    rng = np.random.default_rng(6)
    p, tt = rng.uniform(0.01, 0.99, size=(7, 4)), rng.integers(0, 2, (7, 4)).astype(float)
    direct = sum(-(tt[i, j] * math.log(p[i, j]) + (1 - tt[i, j]) * math.log(1 - p[i, j]))
                 for i in range(7) for j in range(4)) / 28
    assert binary_cross_entropy(Tensor(p), tt).item() == pytest.approx(direct, rel=1e-12)
    with pytest.raises(ValueError):
        binary_cross_entropy(Tensor(p), tt * 0.5)
    assert grad_check(lambda q: binary_cross_entropy(q, tt), p) <= 1e-4


@settings(max_examples=50, deadline=None)
@given(arrays(np.float64, (4, 3), elements=st.floats(-20, 20)), st.lists(st.integers(0, 2), min_size=4, max_size=4))
def test_losses_non_negative(z, y):
    assert softmax_cross_entropy(Tensor(z), y).item() >= 0
    p = 1 / (1 + np.exp(-z))
    t = (np.arange(12).reshape(4, 3) % 2).astype(float)
    assert binary_cross_entropy(Tensor(p), t).item() >= 0


# -- optimiser ------------------------------------------------------------------------


def _param(v):
    return {"p": Tensor(np.array([float(v)]), requires_grad=True)}


def test_sgd_single_step():
    params = _param(0.0)
    params["p"].grad = np.array([1.0])
    sgd_step(params, SgdState(lr=0.1))
    assert params["p"].data[0] == pytest.approx(-0.1) and params["p"].grad is None


def test_sgd_momentum_recurrence():
    params, state = _param(0.0), SgdState(lr=0.1, momentum=0.9)
    params["p"].grad = np.array([1.0])
    sgd_step(params, state)
    before = params["p"].data[0]
    params["p"].grad = np.array([1.0])
    sgd_step(params, state)
    assert before - params["p"].data[0] == pytest.approx(0.19, abs=1e-15)


def test_sgd_missing_grad_and_bad_state():
    with pytest.raises(ValueError):
        sgd_step(_param(1.0), SgdState(lr=0.1))
    with pytest.raises(ValueError):
        SgdState(lr=0.0)
    with pytest.raises(ValueError):
        SgdState(lr=0.1, momentum=1.0)


def test_sgd_quadratic_bowl_converges_monotonically():
    params, state = _param(3.0), SgdState(lr=0.1)
    losses = []
    for _ in range(200):
        x = params["p"]
        loss = (x * x).sum()
        losses.append(loss.item())
        loss.backward()
        sgd_step(params, state)
    assert abs(params["p"].data[0]) < 1e-3
    assert all(b < a for a, b in zip(losses, losses[1:]))


def test_clip_grad_norm():
    params = {"a": Tensor([0.0, 0.0], requires_grad=True), "b": Tensor([0.0], requires_grad=True)}
    params["a"].grad, params["b"].grad = np.array([3.0, 0.0]), np.array([4.0])
    assert clip_grad_norm(params, 1.0) == pytest.approx(5.0)
    assert np.linalg.norm(np.r_[params["a"].grad, params["b"].grad]) == pytest.approx(1.0)


def test_training_replay_is_bitwise():
    def run():
        layer = Linear(4, 2, seed=11, name="replay")
        params, state = layer.parameters(), SgdState(lr=0.05, momentum=0.9)
        rng = philox(0, "data")
        for _ in range(20):
            x, y = rng.normal(size=(8, 4)), rng.integers(0, 2, 8)
            softmax_cross_entropy(layer(Tensor(x)), y).backward()
            sgd_step(params, state)
        return layer.weight.data.tobytes() + layer.bias.data.tobytes()

    assert run() == run()
