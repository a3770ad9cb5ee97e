import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from genatt import tensor as tc
from genatt.checks import op_grad_errors
from genatt.tensor import Adam, DegenerateRowError, RngStream, ShapeError, Tensor, grad_check, no_grad

finite = st.floats(-5, 5, allow_nan=False, allow_infinity=False)


def test_matmul_identity():
    out = tc.matmul(Tensor(np.eye(2)), Tensor([[1.0, 2.0], [3.0, 4.0]]))
    np.testing.assert_array_equal(out.data, [[1, 2], [3, 4]])


def test_matmul_row_col():
    assert tc.matmul(Tensor([[1.0, 2.0]]), Tensor([[3.0], [4.0]])).data.tolist() == [[11.0]]


def test_matmul_grad_is_ones_times_bT():
    r = np.random.default_rng(0)
    a = Tensor(r.normal(size=(3, 4)), requires_grad=True)
    b = Tensor(r.normal(size=(4, 2)))
    tc.matmul(a, b).sum().backward()
    np.testing.assert_allclose(a.grad, np.ones((3, 2)) @ b.data.T, rtol=1e-12)
    assert grad_check(lambda: tc.matmul(a, b).sum(), [a]) < 1e-8


def test_matmul_shape_error_names_both_shapes():
    with pytest.raises(ShapeError, match=r"\(2, 3\).*\(2, 3\)"):
        tc.matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((2, 3))))


@pytest.mark.parametrize(
    "x, mask, expected",
    [
        ([[0.0, 0.0]], None, [[0.5, 0.5]]),
        ([[5.0, 5.0]], [[True, False]], [[1.0, 0.0]]),
        ([[1.0, 0.0]], None, [[0.7311, 0.2689]]),
    ],
)
def test_softmax_rows_examples(x, mask, expected):
    out = tc.softmax_rows(Tensor(x), None if mask is None else np.array(mask))
    np.testing.assert_allclose(out.data, expected, atol=1e-4)


def test_softmax_logistic_oracle():
    out = tc.softmax_rows(Tensor([[1.0, 0.0]])).data
    assert out[0, 0] == pytest.approx(1.0 / (1.0 + math.exp(-1.0)), abs=1e-15)


def test_softmax_fully_masked_row_raises():
    with pytest.raises(DegenerateRowError):
        tc.softmax_rows(Tensor(np.zeros((2, 2))), np.array([[True, False], [False, False]]))


@settings(max_examples=50, deadline=None)
@given(arrays(np.float64, (3, 4, 4), elements=finite))
def test_softmax_masked_rows_stochastic(x):
    mask = np.tril(np.ones((4, 4), dtype=bool))
    out = tc.softmax_rows(Tensor(x), mask).data
    assert np.all(out[:, ~mask] == 0.0)
    np.testing.assert_allclose(out.sum(-1), 1.0, atol=1e-12)


def test_grad_check_quadratic():
    x = Tensor([1.0, 2.0], requires_grad=True)
    (x * x).sum().backward()
    np.testing.assert_array_equal(x.grad, [2.0, 4.0])
    assert grad_check(lambda: (x * x).sum(), [x]) < 1e-8


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_grad_check_nonfinite_loss_fails():
    x = Tensor([-1.0], requires_grad=True)
    assert grad_check(lambda: tc.log(x).sum(), [x]) == math.inf


def test_grad_check_requires_double():
    x = Tensor(np.ones(2, dtype=np.float32), requires_grad=True)
    with pytest.raises(TypeError):
        grad_check(lambda: x.sum(), [x])


@pytest.mark.parametrize("name, err", sorted(op_grad_errors().items()))
def test_op_gradients(name, err):
    assert err < 1e-6, name


@pytest.mark.parametrize(
    "fn, x, expected",
    [
        (tc.exp, 0.0, 1.0),
        (tc.log, 1.0, 0.0),
        (tc.sqrt, 4.0, 2.0),
        (tc.tanh, 0.0, 0.0),
        (tc.sigmoid, 0.0, 0.5),
    ],
)
def test_elementwise_trivial(fn, x, expected):
    assert fn(Tensor([x])).item() == pytest.approx(expected)


def test_sigmoid_is_stable_at_extremes():
    out = tc.sigmoid(Tensor([-1000.0, 1000.0])).data
    assert np.all(np.isfinite(out))
    np.testing.assert_allclose(out, [0.0, 1.0])


def test_broadcast_grad_is_unbroadcast():
    a = Tensor(np.ones((2, 3)), requires_grad=True)
    b = Tensor(np.ones(3), requires_grad=True)
    (a * b).sum().backward()
    np.testing.assert_array_equal(b.grad, [2.0, 2.0, 2.0])


def test_reused_node_accumulates():
    x = Tensor([3.0], requires_grad=True)
    y = x * x
    (y + y).sum().backward()
    assert x.grad[0] == 12.0


def test_no_grad_builds_no_graph():
    x = Tensor([1.0], requires_grad=True)
    with no_grad():
        y = x * 2.0
    assert not y.requires_grad


def test_reshape_transpose_sum_mean():
    x = Tensor(np.arange(6.0).reshape(2, 3))
    assert x.reshape(3, 2).shape == (3, 2)
    assert x.transpose().shape == (3, 2)
    assert x.sum().item() == 15.0
    assert x.mean(axis=0).data.tolist() == [1.5, 2.5, 3.5]


def test_dropout_inverted_scaling():
    x = Tensor(np.ones((200, 200)))
    out = tc.dropout(x, 0.4, RngStream(0), True).data
    kept = out[out > 0]
    np.testing.assert_allclose(kept, 1.0 / 0.6)
    assert abs(out.mean() - 1.0) < 0.02
    assert tc.dropout(x, 0.4, None, training=False) is x


def test_adam_and_zero_lr():
    w = Tensor(np.array([1.0, -2.0]), requires_grad=True)
    opt = Adam({"w": w}, lr=0.0)
    (w * w).sum().backward()
    opt.step()
    np.testing.assert_array_equal(w.data, [1.0, -2.0])
    opt = Adam({"w": w}, lr=0.1)
    for _ in range(200):
        opt.zero_grad()
        (w * w).sum().backward()
        opt.step()
    assert np.abs(w.data).max() < 0.05


def test_sgd_step():
    w = Tensor(np.array([1.0]), requires_grad=True)
    (w * w).sum().backward()
    tc.sgd_step([w], 0.25)
    assert w.data[0] == 0.5


def test_rng_streams_reproducible_and_forks_differ():
    a, b = RngStream(5), RngStream(5)
    np.testing.assert_array_equal(a.normal((4,)), b.normal((4,)))
    assert a.counter == 4
    f1, f2 = RngStream(5).fork(1), RngStream(5).fork(2)
    assert not np.array_equal(f1.normal((4,)), f2.normal((4,)))
    np.testing.assert_array_equal(RngStream(5).fork(1).normal((3,)), RngStream(5).fork(1).normal((3,)))


@settings(max_examples=30, deadline=None)
@given(arrays(np.float64, (2, 3), elements=finite), arrays(np.float64, (2, 3), elements=finite))
def test_add_mul_match_numpy(x, y):
    np.testing.assert_array_equal((Tensor(x) + Tensor(y)).data, x + y)
    np.testing.assert_array_equal((Tensor(x) * y).data, x * y)
    np.testing.assert_array_equal((y - Tensor(x)).data, y - x)
