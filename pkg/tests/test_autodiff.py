import numpy as np
import pytest

from rmnet.autodiff import (ContractError, DimensionError, NonFiniteError, Tensor, add, backward, concat,
                            crop2d, default_dtype, make_op, matmul, mean_all, mul, no_grad, pad2d,
                            precision, relu, reshape, sub, sum_all, tanh, tensor, trace, zero_grad)
from rmnet.nn import conv2d

from conftest import grad_rel_err


def test_default_dtype_is_float32_and_switchable():
    assert tensor([1.0]).dtype == np.float32
    with precision(np.float64):
        assert default_dtype() == np.float64
        assert tensor([1.0]).dtype == np.float64
    assert default_dtype() == np.float32


def test_add_scalar_shift():
    out = add(tensor([[[[1, 2], [3, 4]]]]), 1)
    np.testing.assert_array_equal(out.data, [[[[2, 3], [4, 5]]]])


def test_mul_by_zero_annihilates_value_and_gradient():
    x = tensor(np.arange(8.0).reshape(1, 2, 2, 2), requires_grad=True)
    out = mul(x, 0)
    assert not out.data.any()
    backward(sum_all(out))
    assert x.grad.shape == x.shape and not x.grad.any()


def test_shape_mismatch_is_a_dimension_error():
    with pytest.raises(DimensionError):
        add(tensor(np.ones((1, 2, 3, 3))), tensor(np.ones((1, 3, 3, 3))))


def test_per_channel_broadcast_is_allowed():
    x = tensor(np.zeros((2, 3, 4, 4)))
    out = add(x, tensor(np.arange(3.0).reshape(1, 3, 1, 1)))
    assert out.shape == x.shape
    np.testing.assert_array_equal(out.data[1, 2], np.full((4, 4), 2.0))


def test_linear_map_gradient_is_the_input():
    x = np.random.default_rng(0).normal(size=(1, 2, 3, 3))
    w = tensor(np.ones_like(x), requires_grad=True)
    backward(sum_all(mul(w, tensor(x))))
    np.testing.assert_allclose(w.grad, x.astype(np.float32))


def test_backward_twice_doubles_gradients():
    w = tensor(np.full((1, 1, 2, 2), 3.0), requires_grad=True)
    loss = sum_all(mul(w, w))
    backward(loss)
    first = w.grad.copy()
    backward(loss)
    np.testing.assert_array_equal(w.grad, 2 * first)
    zero_grad([w])
    assert w.grad is None


def test_backward_needs_a_scalar():
    x = tensor(np.ones((1, 1, 2, 2)), requires_grad=True)
    with pytest.raises(ContractError):
        backward(mul(x, 2))


def test_non_finite_forward_is_an_error():
    with pytest.raises(NonFiniteError):
        mul(tensor([np.inf]), 1.0)


def test_no_grad_records_nothing():
    x = tensor(np.ones((1, 1, 2, 2)), requires_grad=True)
    with no_grad():
        y = mul(x, 2)
    assert y.parents == () and not y.requires_grad


def test_tape_is_topological():
    x = tensor(np.ones((1, 1, 2, 2)), requires_grad=True)
    y = relu(mul(x, 2))
    loss = sum_all(add(y, y))
    order = trace(loss).ops()
    assert order.index("mul") < order.index("relu") < order.index("add") < order.index("sum")


def test_make_op_skips_graph_for_constants():
    out = make_op("noop", np.ones(2), (tensor([1.0, 2.0]),), lambda g: (g,))
    assert not out.requires_grad and out.parents == ()


@pytest.mark.parametrize("seed", range(5))
def test_elementwise_gradients_match_finite_differences(seed, f64):
    rng = np.random.default_rng(seed)
    a = tensor(rng.normal(size=(2, 3, 3, 3)), requires_grad=True)
    b = tensor(rng.normal(size=(2, 3, 3, 3)), requires_grad=True)
    c = tensor(rng.normal(size=(1, 3, 1, 1)), requires_grad=True)
    assert grad_rel_err(lambda: sum_all(add(a, b)), [a, b]) < 1e-6
    loss = lambda: mean_all(tanh(sub(mul(a, b), c)))
    assert grad_rel_err(loss, [a, b, c]) < 1e-4


@pytest.mark.parametrize("seed", range(5))
def test_shape_op_gradients(seed, f64):
    rng = np.random.default_rng(seed)
    a = tensor(rng.normal(size=(2, 2, 4, 4)), requires_grad=True)
    b = tensor(rng.normal(size=(2, 3, 4, 4)), requires_grad=True)
    w = tensor(rng.normal(size=(180, 3)), requires_grad=True)
    r = tensor(rng.normal(size=(2, 5, 6, 6)))

    def loss():
        z = pad2d(concat([a, b], axis=1), 1, 1, 1, 1)
        z = mul(z, r)
        m = matmul(reshape(z, (2, 180)), w)
        return sum_all(mul(m, m)) + sum_all(crop2d(z, 1, 2, 3, 3))

    assert grad_rel_err(loss, [a, b, w]) < 1e-4


@pytest.mark.parametrize("seed", range(5))
def test_mean_relu_conv_gradients(seed, f64):
    rng = np.random.default_rng(seed)
    x = tensor(rng.normal(size=(2, 3, 6, 6)), requires_grad=True)
    w = tensor(rng.normal(size=(4, 3, 3, 3)), requires_grad=True)
    assert grad_rel_err(lambda: mean_all(relu(conv2d(x, w, padding=1))), [x, w]) < 1e-4


def test_forward_is_bitwise_deterministic():
    rng = np.random.default_rng(3)
    x, w = rng.normal(size=(2, 3, 8, 8)), rng.normal(size=(4, 3, 3, 3))
    a = conv2d(tensor(x), tensor(w), padding=1).data
    b = conv2d(tensor(x), tensor(w), padding=1).data
    assert a.tobytes() == b.tobytes()


def test_tensor_repr_and_item():
    t = Tensor(np.array([[2.5]]))
    assert t.item() == 2.5
    assert "Tensor" in repr(t)
