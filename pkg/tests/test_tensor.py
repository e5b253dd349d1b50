import zlib

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays

from recem import tensor as T
from recem.tensor import NonFiniteError, ShapeError, Tensor, grad_check, make_tensor


def central_diff(f, x, eps=1e-5):
    """Independent finite-difference oracle over plain numpy functions."""
    x = np.array(x, dtype=np.float64)
    g = np.zeros_like(x)
    for i in np.ndindex(x.shape):
        xp, xm = x.copy(), x.copy()
        xp[i] += eps
        xm[i] -= eps
        g[i] = (f(xp) - f(xm)) / (2 * eps)
    return g


# -- construction ---------------------------------------------------------------------


def test_make_tensor_row_major():
    t = make_tensor([2, 2], [1, 2, 3, 4])
    assert t.shape == (2, 2)
    assert t.data.tolist() == [[1, 2], [3, 4]]
    assert t.grad is None and t._backward is None


@pytest.mark.parametrize("shape,data", [([0], []), ([], [1.0]), ([2], [1, 2, 3])])
def test_make_tensor_rejects_bad_shapes(shape, data):
    with pytest.raises(ShapeError):
        make_tensor(shape, data)


@pytest.mark.parametrize("bad", [np.nan, np.inf, -np.inf])
def test_make_tensor_rejects_non_finite(bad):
    with pytest.raises(NonFiniteError):
        make_tensor([2], [1.0, bad])


def test_debug_mode_catches_non_finite_op():
    x = Tensor([1000.0], requires_grad=True)
    with T.debug_mode():
        with pytest.raises(NonFiniteError):
            T.exp(x)
    T.exp(x)  # release mode lets it through


# -- forward values -------------------------------------------------------------------


def test_elementwise_examples():
    assert T.sigmoid(Tensor([0.0])).item() == 0.5
    assert T.elementwise("add", Tensor([1.0, 2.0]), Tensor([3.0, 4.0])).data.tolist() == [4, 6]
    assert T.elementwise("sub", Tensor([1.0]), Tensor([3.0])).item() == -2
    assert T.elementwise("mul", Tensor([2.0]), Tensor([3.0])).item() == 6
    assert T.elementwise("scale_by_const", Tensor([2.0]), 1.5).item() == 3
    assert T.elementwise("neg", Tensor([2.0])).item() == -2
    assert T.elementwise("relu", Tensor([-1.0, 0.0, 2.0])).data.tolist() == [0, 0, 2]
    with pytest.raises(ValueError):
        T.elementwise("pow", Tensor([1.0]))


def test_sigmoid_stable_extremes():
    s = T.sigmoid(Tensor([-800.0, -30.0, 30.0, 800.0])).data
    assert np.all(np.isfinite(s))
    assert 0 <= s[0] < 1e-300 and s[-1] == 1.0


def test_broadcast_rules():
    a = Tensor(np.ones((3, 4)))
    assert T.add(a, Tensor(np.ones((1, 4)))).shape == (3, 4)
    assert T.mul(a, Tensor(np.ones((3, 1)))).shape == (3, 4)
    for bad in (np.ones(4), np.ones((2, 4)), np.ones((4, 3))):
        with pytest.raises(ShapeError):
            T.add(a, Tensor(bad))


def test_matmul_examples():
    eye = Tensor([[1.0, 0.0], [0.0, 1.0]])
    m = Tensor([[5.0, 6.0], [7.0, 8.0]])
    assert (eye @ m).data.tolist() == [[5, 6], [7, 8]]
    assert (Tensor([[1.0, 2.0]]) @ Tensor([[3.0], [4.0]])).data.tolist() == [[11]]
    with pytest.raises(ShapeError):
        Tensor(np.ones((2, 3))) @ Tensor(np.ones((2, 3)))


def test_reduce_examples():
    x = Tensor([1.0, 2.0, 3.0])
    assert T.reduce("mean", x).item() == 2
    assert T.reduce("sum", x).item() == 6
    assert T.reduce("l1_norm", Tensor([1.0, -2.0, 0.0])).item() == 3
    with pytest.raises(ShapeError):
        T.reduce("sum", x, axis=1)
    m = Tensor(np.arange(6.0).reshape(2, 3))
    assert T.reduce_sum(m, axis=0).data.tolist() == [3, 5, 7]
    assert T.reduce_mean(m, axis=1, keepdims=True).shape == (2, 1)
    assert T.reduce_mean(m, keepdims=True).shape == (1, 1)


def test_l1_subgradient_convention():
    x = Tensor([1.0, -2.0, 0.0], requires_grad=True)
    T.l1_norm(x).backward()
    assert x.grad.tolist() == [1, -1, 0]


def test_concat_slice_roundtrip_and_routing():
    a = Tensor([[1.0], [2.0]], requires_grad=True)
    b = Tensor([[3.0], [4.0]], requires_grad=True)
    c = T.concat([a, b], axis=1)
    assert c.data.tolist() == [[1, 3], [2, 4]]
    assert np.array_equal(T.slice_(c, 1, 0, 1).data, a.data)
    c.sum().backward()
    assert a.grad.tolist() == [[1], [1]] and b.grad.tolist() == [[1], [1]]
    with pytest.raises(ShapeError):
        T.concat([a, Tensor(np.ones((3, 1)))], axis=1)
    with pytest.raises(ShapeError):
        T.slice_(c, 1, 1, 3)


def test_backward_examples():
    x = Tensor([0.0, 0.0, 0.0], requires_grad=True)
    x.sum().backward()
    assert x.grad.tolist() == [1, 1, 1]
    y = Tensor([1.0, 2.0], requires_grad=True)
    (y * y).sum().backward()
    assert y.grad.tolist() == [2, 4]
    with pytest.raises(ShapeError):
        (y * y).backward()


def test_backward_accumulates_across_calls():
    y = Tensor([1.0, 2.0], requires_grad=True)
    (y * y).sum().backward()
    (y * y).sum().backward()
    assert y.grad.tolist() == [4, 8]


def test_shared_subgraph_fanout_counted_once_per_use():
    x = Tensor([3.0], requires_grad=True)
    s = x * x  # used twice below
    (s + s).backward()
    assert x.grad.tolist() == [12.0]


def test_no_grad_records_nothing():
    x = Tensor([1.0], requires_grad=True)
    with T.no_grad():
        y = x * x
    assert not y.requires_grad and y._parents == ()


def test_softmax_rows_sum_to_one():
    rng = np.random.default_rng(0)
    s = T.softmax(Tensor(rng.normal(size=(20, 7)) * 30)).data
    assert np.max(np.abs(s.sum(axis=1) - 1)) <= 1e-12


# -- gradients against the finite-difference oracle ----------------------------------


def test_sigmoid_derivative_at_zero():
    x = Tensor([0.0], requires_grad=True)
    T.sigmoid(x).sum().backward()
    numeric = central_diff(lambda v: 1 / (1 + np.exp(-v[0])), [0.0])
    assert x.grad[0] == pytest.approx(0.25, abs=1e-12)
    assert abs(x.grad[0] - numeric[0]) <= 1e-8


def test_matmul_gradient_matches_oracle():
    rng = np.random.default_rng(1)
    a0, b0 = rng.normal(size=(3, 4)), rng.normal(size=(4, 2))
    a = Tensor(a0, requires_grad=True)
    (a @ Tensor(b0)).sum().backward()
    numeric = central_diff(lambda v: float(np.sum(v @ b0)), a0)
    assert np.max(np.abs(a.grad - numeric) / np.maximum(1, np.abs(numeric))) <= 1e-6
    assert np.allclose(a.grad, np.broadcast_to(b0.sum(axis=1), (3, 4)))


UNARY = {
    "sigmoid": (T.sigmoid, lambda v: 1 / (1 + np.exp(-v))),
    "relu": (T.relu, lambda v: np.maximum(v, 0)),
    "exp": (T.exp, np.exp),
    "neg": (T.neg, np.negative),
    "scale": (lambda t: T.scale(t, -1.7), lambda v: -1.7 * v),
    "add_const": (lambda t: T.add_const(t, 0.3), lambda v: v + 0.3),
    "log": (lambda t: T.log(T.add_const(T.mul(t, t), 0.5)), lambda v: np.log(v * v + 0.5)),
    "clamp": (lambda t: T.clamp(t, -0.5, 0.7), lambda v: np.clip(v, -0.5, 0.7)),
    "l1": (lambda t: T.l1_norm(t, axis=1, keepdims=True), lambda v: np.abs(v).sum(axis=1, keepdims=True)),
    "mean_axis0": (lambda t: T.reduce_mean(t, axis=0), lambda v: v.mean(axis=0)),
    "transpose": (T.transpose, lambda v: v.T),
    "reshape": (lambda t: T.reshape(t, (-1,)), lambda v: v.reshape(-1)),
    "log_softmax": (T.log_softmax, lambda v: v - np.log(np.exp(v - v.max(1, keepdims=True)).sum(1, keepdims=True))
                    - v.max(1, keepdims=True)),
    "softmax": (T.softmax, lambda v: np.exp(v) / np.exp(v).sum(1, keepdims=True)),
    "slice": (lambda t: T.slice_(t, 1, 1, 3), lambda v: v[:, 1:3]),
}


@pytest.mark.parametrize("name", sorted(UNARY))
def test_unary_gradients_vs_numpy_oracle(name):
    """Analytic gradient of sum(w * op(x)) vs finite differences of a numpy reimplementation."""
    op, ref = UNARY[name]
    rng = np.random.default_rng(zlib.crc32(name.encode()))
    for _ in range(8):
        x0 = rng.normal(size=(3, 4))
        x0[np.abs(x0) < 1e-3] = 0.5  # keep relu/abs/clamp kinks away
        x0[np.abs(x0 + 0.5) < 1e-3] = 0.1
        x0[np.abs(x0 - 0.7) < 1e-3] = 0.1
        w = rng.normal(size=ref(x0).shape)
        x = Tensor(x0, requires_grad=True)
        (op(x) * Tensor(w)).sum().backward()
        numeric = central_diff(lambda v: float(np.sum(w * ref(v))), x0)
        err = np.max(np.abs(x.grad - numeric) / np.maximum(1, np.abs(numeric)))
        assert err <= 1e-4, (name, err)


BINARY = {
    "add": (T.add, np.add),
    "sub": (T.sub, np.subtract),
    "mul": (T.mul, np.multiply),
    "matmul": (T.matmul, np.matmul),
    "concat": (lambda a, b: T.concat([a, b], axis=1), lambda a, b: np.concatenate([a, b], axis=1)),
}


@pytest.mark.parametrize("name", sorted(BINARY))
@pytest.mark.parametrize("b_shape", [(3, 4), (1, 4), (3, 1)])
def test_binary_gradients_both_operands(name, b_shape):
    op, ref = BINARY[name]
    if name == "matmul":
        b_shape = (4, 2)
    if name == "concat" and b_shape[0] != 3:
        pytest.skip("concat needs equal leading dims")
    rng = np.random.default_rng(7)
    a0, b0 = rng.normal(size=(3, 4)), rng.normal(size=b_shape)
    w = rng.normal(size=ref(a0, b0).shape)
    a, b = Tensor(a0, requires_grad=True), Tensor(b0, requires_grad=True)
    (op(a, b) * Tensor(w)).sum().backward()
    na = central_diff(lambda v: float(np.sum(w * ref(v, b0))), a0)
    nb = central_diff(lambda v: float(np.sum(w * ref(a0, v))), b0)
    assert a.grad.shape == a0.shape and b.grad.shape == b0.shape
    assert np.max(np.abs(a.grad - na)) <= 1e-6
    assert np.max(np.abs(b.grad - nb)) <= 1e-6


def _random_graph(rng, x: Tensor) -> Tensor:
    """A random composite of the op set ending in a scalar; magnitudes stay O(1)-O(10)."""
    w = Tensor(rng.normal(size=(x.shape[1], 3)))
    h = x @ w
    for _ in range(rng.integers(1, 4)):
        pick = rng.integers(6)
        if pick == 0:
            h = T.sigmoid(h)
        elif pick == 1:
            h = T.relu(h) + h * 0.1
        elif pick == 2:
            h = T.log_softmax(h)
        elif pick == 3:
            h = T.concat([h, T.sigmoid(h) * h], axis=1)
            h = h @ Tensor(rng.normal(size=(h.shape[1], 3)) / np.sqrt(h.shape[1]))
        elif pick == 4:
            h = h - h.mean(axis=0, keepdims=True)
        else:
            h = T.exp(T.clamp(h, -3.0, 3.0))
    return T.l1_norm(h) * 0.1 + (h * h).mean()


def test_random_composite_graphs_grad_check():
    rng = np.random.default_rng(2024)
    worst = 0.0
    for i in range(100):
        x0 = rng.normal(size=(4, 3))
        g_rng = np.random.default_rng(i)
        state = g_rng.bit_generator.state

        def f(t, state=state):
            r = np.random.default_rng()
            r.bit_generator.state = state
            return _random_graph(r, t)

        worst = max(worst, grad_check(f, x0, rng=np.random.default_rng(i)))
    assert worst <= 1e-4


def test_grad_check_sum_is_exact():
    assert grad_check(lambda t: t.sum(), np.random.default_rng(0).normal(size=(5, 2))) <= 1e-10


def test_grad_check_sigmoid_matmul_chain():
    rng = np.random.default_rng(3)
    w = Tensor(rng.normal(size=(4, 2)))
    assert grad_check(lambda t: T.sigmoid(t @ w).sum(), rng.normal(size=(3, 4))) <= 1e-4


def test_grad_check_resamples_kinks():
    info = {}
    x = np.array([[0.0, 1.0, -2.0]])
    err = grad_check(lambda t: T.relu(t).sum(), x, info=info)
    assert info["resampled"] >= 1
    assert err <= 1e-8


def test_grad_check_rejects_non_scalar():
    with pytest.raises(ShapeError):
        grad_check(lambda t: t * 2.0, np.ones((2, 2)) + 1)


# -- properties -----------------------------------------------------------------------

finite = st.floats(-50, 50, allow_nan=False, allow_infinity=False)


@settings(max_examples=60, deadline=None)
@given(arrays(np.float64, (3, 4), elements=finite), arrays(np.float64, (3, 4), elements=finite))
def test_add_commutes_and_mul_grad_is_other_operand(a0, b0):
    a, b = Tensor(a0, requires_grad=True), Tensor(b0, requires_grad=True)
    assert np.array_equal((a + b).data, (b + a).data)
    (a * b).sum().backward()
    assert np.array_equal(a.grad, b0) and np.array_equal(b.grad, a0)


@settings(max_examples=60, deadline=None)
@given(arrays(np.float64, (2, 5), elements=finite), st.integers(1, 4))
def test_concat_slice_conserves_gradient_mass(x0, cut):
    x = Tensor(x0, requires_grad=True)
    parts = [T.slice_(x, 1, 0, cut), T.slice_(x, 1, cut, 5)]
    g = np.arange(10.0).reshape(2, 5)
    (T.concat(parts, axis=1) * Tensor(g)).sum().backward()
    assert np.array_equal(x.grad, g)
    assert x.grad.sum() == g.sum()


@settings(max_examples=60, deadline=None)
@given(arrays(np.float64, (4, 3), elements=st.floats(-700, 700)))
def test_sigmoid_open_interval_and_softmax_normalised(x0):
    s = T.sigmoid(Tensor(x0)).data
    assert np.all(s >= 0) and np.all(s <= 1)
    moderate = T.sigmoid(Tensor(np.clip(x0, -30, 30))).data
    assert np.all(moderate > 0) and np.all(moderate < 1)
    sm = T.softmax(Tensor(x0)).data
    assert np.allclose(sm.sum(axis=1), 1.0, atol=1e-12)


@settings(max_examples=40, deadline=None)
@given(arrays(np.float64, (3, 3), elements=finite), st.floats(-5, 5))
def test_sum_is_linear(x0, c):
    assert T.reduce_sum(T.scale(Tensor(x0), c)).item() == pytest.approx(c * x0.sum(), abs=1e-9)
