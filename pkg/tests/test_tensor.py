import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays
from scipy.signal import correlate

from psl import tensor as T
from psl.tensor import ShapeError, Tensor

from oracles import RandomConvNet, central_difference, max_relative_error


def test_swish_at_zero():
    assert T.forward_op("swish", [Tensor([0.0])]).data.tolist() == [0.0]


def test_cross_entropy_on_uniform_logits_is_log2():
    loss = T.softmax_cross_entropy(Tensor([[0.0, 0.0]]), [0])
    assert loss.item() == pytest.approx(math.log(2), abs=1e-15)


def test_relu_forward():
    assert T.relu(Tensor([1.0, -1.0])).data.tolist() == [1.0, 0.0]


def test_sign_examples():
    assert T.sign(Tensor([0.2, -0.1, 0.0])).data.tolist() == [1.0, -1.0, 0.0]
    assert T.sign(Tensor(np.zeros((2, 3)))).data.tolist() == np.zeros((2, 3)).tolist()
    assert T.sign(Tensor([-3.5])).data.tolist() == [-1.0]


def test_sum_relu_gradient_uses_zero_subgradient():
    x = Tensor([1.0, -1.0], requires_grad=True)
    T.backward(T.sum_all(T.relu(x)))
    assert x.grad.tolist() == [1.0, 0.0]


def test_floor_scale_identity_backward_gives_weight():
    rng = np.random.default_rng(0)
    x = Tensor(rng.normal(size=7), requires_grad=True)
    w = Tensor(2.0)
    T.backward(T.sum_all(T.mul(w, T.floor_scale(x, 8.0, backward="identity"))))
    assert np.all(x.grad == 2.0)


def test_floor_scale_exact_backward_is_zero():
    x = Tensor([0.13, -0.4, 2.2], requires_grad=True)
    T.backward(T.sum_all(T.floor_scale(x, 8.0, backward="exact")))
    assert np.all(x.grad == 0.0)


def test_backward_rejects_non_scalar():
    x = Tensor([1.0, 2.0], requires_grad=True)
    with pytest.raises(ShapeError):
        T.backward(T.relu(x))


def test_backward_rejects_loss_without_grad():
    with pytest.raises(RuntimeError):
        T.backward(T.sum_all(Tensor([1.0])))


def test_unknown_op_kind():
    with pytest.raises(ValueError, match="unknown op kind"):
        T.forward_op("maxpool", [Tensor([1.0])])


def test_conv_shape_mismatch_names_dimensions():
    x = Tensor(np.zeros((1, 2, 4, 4)))
    k = Tensor(np.zeros((3, 5, 3, 3)))
    with pytest.raises(ShapeError, match="conv2d"):
        T.conv2d(x, k)
    with pytest.raises(ShapeError, match="conv2d"):
        T.conv2d(x, Tensor(np.zeros((3, 2, 5, 5))))


def test_dense_shape_mismatch():
    with pytest.raises(ShapeError, match="dense"):
        T.dense(Tensor(np.zeros((2, 4))), Tensor(np.zeros((3, 5))))


def test_add_broadcast_mismatch():
    with pytest.raises(ShapeError):
        T.add(Tensor(np.zeros(3)), Tensor(np.zeros(4)))


def test_conv_matches_scipy_correlation():
    rng = np.random.default_rng(5)
    x = rng.normal(size=(2, 3, 6, 5))
    k = rng.normal(size=(4, 3, 3, 3))
    b = rng.normal(size=4)
    out = T.conv2d(Tensor(x), Tensor(k), Tensor(b)).data
    ref = np.zeros((2, 4, 6, 5))
    for n in range(2):
        for o in range(4):
            ref[n, o] = b[o] + sum(correlate(x[n, c], k[o, c], mode="same") for c in range(3))
    assert out.shape == x.shape[:1] + (4,) + x.shape[2:]
    np.testing.assert_allclose(out, ref, rtol=0, atol=1e-12)


@pytest.mark.parametrize("seed", range(24))
def test_random_network_gradients_match_finite_differences(seed):
    net = RandomConvNet(seed, activation="relu" if seed % 2 else "swish")
    analytic = net.analytic()
    arrays_ = net.arrays()
    numeric = central_difference(net.value, list(arrays_.values()))
    assert max_relative_error([analytic[k] for k in arrays_], numeric) < 1e-4


@pytest.mark.parametrize("kind", ["add", "mul"])
def test_binary_op_gradients_with_broadcasting(kind):
    rng = np.random.default_rng(9)
    a = rng.normal(size=(3, 4))
    b = rng.normal(size=(4,))

    def f(ta, tb):
        return T.sum_all(T.mul(T.forward_op(kind, [ta, tb]), T.forward_op(kind, [ta, tb])))

    ta, tb = Tensor(a, requires_grad=True), Tensor(b, requires_grad=True)
    T.backward(f(ta, tb))
    numeric = central_difference(lambda: f(Tensor(a), Tensor(b)).item(), [a, b])
    assert max_relative_error([ta.grad, tb.grad], numeric) < 1e-4


def test_fan_out_accumulates():
    rng = np.random.default_rng(2)
    data = rng.normal(size=(2, 3, 4, 4))
    k = rng.normal(size=(2, 3, 3, 3))

    def f(x):
        return T.sum_all(T.swish(T.conv2d(x, Tensor(k))))

    single = Tensor(data, requires_grad=True)
    T.backward(f(single))
    double = Tensor(data, requires_grad=True)
    T.backward(T.add(f(double), f(double)))
    assert np.array_equal(double.grad, 2 * single.grad)


def test_grads_accumulate_across_backward_calls():
    x = Tensor([1.0, 2.0], requires_grad=True)
    T.backward(T.sum_all(T.mul(x, x)))
    T.backward(T.sum_all(T.mul(x, x)))
    assert x.grad.tolist() == [4.0, 8.0]


def test_graph_released_after_backward():
    x = Tensor([1.0], requires_grad=True)
    y = T.sum_all(T.relu(x))
    T.backward(y)
    assert y._node is None


def test_no_grad_records_nothing():
    x = Tensor([1.0], requires_grad=True)
    with T.no_grad():
        y = T.relu(x)
    assert y._node is None and not y.requires_grad


def test_node_ids_are_topological():
    x = Tensor(np.ones((1, 1, 3, 3)), requires_grad=True)
    h = T.conv2d(x, Tensor(np.ones((1, 1, 3, 3)), requires_grad=True))
    y = T.sum_all(T.relu(h))
    assert h._node.id < y._node.id


@settings(max_examples=50, deadline=None)
@given(arrays(np.float64, (2, 2, 3, 3), elements=st.floats(-5, 5)))
def test_forward_is_deterministic(x):
    k = np.linspace(-1, 1, 2 * 2 * 9).reshape(2, 2, 3, 3)
    a = T.swish(T.conv2d(Tensor(x), Tensor(k))).data
    b = T.swish(T.conv2d(Tensor(x), Tensor(k))).data
    assert np.array_equal(a, b)


@settings(max_examples=50, deadline=None)
@given(st.integers(1, 3), st.integers(1, 9), st.integers(1, 9))
def test_conv_preserves_spatial_extent(c, h, w):
    x = Tensor(np.ones((2, c, h, w)))
    assert T.conv2d(x, Tensor(np.ones((4, c, 3, 3)))).shape == (2, 4, h, w)


@settings(max_examples=100, deadline=None)
@given(arrays(np.float64, 20, elements=st.floats(-700, 700)))
def test_swish_is_finite_and_bounded_below(x):
    y = T.swish(Tensor(x)).data
    assert np.all(np.isfinite(y))
    assert np.all(y >= -0.2785)


def test_log_softmax_is_stable_for_large_logits():
    loss = T.softmax_cross_entropy(Tensor([[1000.0, -1000.0]]), [1])
    assert loss.item() == pytest.approx(2000.0)


def test_cross_entropy_per_example_reduction():
    logits = Tensor([[0.0, 0.0], [10.0, 0.0]])
    per = T.softmax_cross_entropy(logits, [0, 0], reduction="none").data
    assert per.shape == (2,)
    assert per[0] == pytest.approx(math.log(2))
