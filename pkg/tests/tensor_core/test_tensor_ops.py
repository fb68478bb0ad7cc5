import numpy as np
import pytest

from helpers import analytic_grads, away_from_zero, numeric_grad, random_tensor, relative_error
from roicodec.base.exceptions import ContractError, DimensionError, NumericError, ParameterError
from roicodec.operators.tensor_core.api import (
    Tape,
    Tensor,
    backward,
    concat,
    conv2d,
    crop,
    elementwise,
    reduce_mean,
    reduce_sum,
    relu,
    softplus,
    upsample_conv2d,
)


def test_conv2d_identity_kernel():
    x = Tensor(np.arange(16, dtype=np.float32).reshape(1, 1, 4, 4))
    out = conv2d(x, Tensor.ones((1, 1, 1, 1)), Tensor.zeros((1, 1, 1, 1)), stride=1, padding=0)
    np.testing.assert_array_equal(out.data, x.data)


def test_conv2d_output_shape():
    x = Tensor.ones((1, 1, 4, 4))
    out = conv2d(x, Tensor.ones((1, 1, 3, 3)), None, stride=2, padding=1)
    assert out.shape == (1, 1, 2, 2)


def test_conv2d_channel_mismatch():
    with pytest.raises(DimensionError):
        conv2d(Tensor.ones((1, 2, 4, 4)), Tensor.ones((1, 3, 3, 3)), None)


def test_conv2d_gradients(float64, rng):
    x = random_tensor(rng, (2, 3, 8, 8))
    w = random_tensor(rng, (4, 3, 3, 3), scale=0.3)
    b = random_tensor(rng, (1, 4, 1, 1))
    weights = rng.normal(size=(2, 4, 4, 4))

    def fn():
        return reduce_sum(conv2d(x, w, b, stride=2, padding=1) * weights)

    grads = analytic_grads(fn, [x, w, b])
    for tensor, grad in zip([x, w, b], grads):
        assert relative_error(grad, numeric_grad(fn, tensor)) < 1e-3


def test_upsample_conv2d_factor_one_equals_conv2d(rng):
    x = random_tensor(rng, (1, 2, 5, 5))
    w = random_tensor(rng, (3, 2, 3, 3))
    b = random_tensor(rng, (1, 3, 1, 1))
    np.testing.assert_array_equal(upsample_conv2d(x, w, b, 1).data, conv2d(x, w, b, 1, 1).data)


def test_upsample_conv2d_nearest_identity():
    x = Tensor(np.array([[[[1.0, 2.0], [3.0, 4.0]]]]))
    out = upsample_conv2d(x, Tensor.ones((1, 1, 1, 1)), None, 2)
    expected = np.array([[1, 1, 2, 2], [1, 1, 2, 2], [3, 3, 4, 4], [3, 3, 4, 4]], dtype=np.float32)
    np.testing.assert_array_equal(out.data[0, 0], expected)


def test_upsample_conv2d_rejects_bad_factor():
    with pytest.raises(ParameterError):
        upsample_conv2d(Tensor.ones((1, 1, 2, 2)), Tensor.ones((1, 1, 1, 1)), None, 0)


def test_upsample_conv2d_gradients(float64, rng):
    x = random_tensor(rng, (2, 2, 3, 4))
    w = random_tensor(rng, (3, 2, 3, 3), scale=0.3)
    b = random_tensor(rng, (1, 3, 1, 1))
    weights = rng.normal(size=(2, 3, 6, 8))

    def fn():
        return reduce_sum(upsample_conv2d(x, w, b, 2) * weights)

    grads = analytic_grads(fn, [x, w, b])
    for tensor, grad in zip([x, w, b], grads):
        assert relative_error(grad, numeric_grad(fn, tensor)) < 1e-3


def test_elementwise_definitions():
    a = Tensor(np.array([-2.0, 3.0]).reshape(1, 1, 1, 2))
    np.testing.assert_array_equal(relu(a).data.ravel(), [0.0, 3.0])
    np.testing.assert_array_equal(elementwise("div", a, Tensor.ones((1, 1, 1, 1))).data, a.data)


def test_division_by_zero():
    with pytest.raises(NumericError):
        elementwise("div", Tensor.ones((1, 1, 1, 1)), Tensor.zeros((1, 1, 1, 1)))


def test_incompatible_shapes():
    with pytest.raises(DimensionError):
        elementwise("add", Tensor.ones((1, 2, 2, 2)), Tensor.ones((1, 3, 2, 2)))


def test_channel_broadcast_equals_replication(rng):
    x = random_tensor(rng, (2, 3, 4, 4))
    mask = Tensor((rng.random((2, 1, 4, 4)) > 0.5).astype(np.float32))
    replicated = Tensor(np.repeat(mask.data, 3, axis=1))
    np.testing.assert_array_equal((x * mask).data, (x * replicated).data)


@pytest.mark.parametrize("op", ["softplus", "sigmoid", "tanh", "exp", "square", "normal_cdf"])
def test_smooth_unary_gradients(float64, rng, op):
    x = random_tensor(rng, (2, 2, 3, 3))

    def fn():
        return reduce_sum(elementwise(op, x))

    (grad,) = analytic_grads(fn, [x])
    assert relative_error(grad, numeric_grad(fn, x)) < 1e-4


@pytest.mark.parametrize("op", ["relu", "abs", "clamp_min"])
def test_nonsmooth_unary_gradients(float64, rng, op):
    x = Tensor(away_from_zero(rng.normal(size=(2, 2, 3, 3))))

    def fn():
        return reduce_sum(elementwise(op, x, threshold=0.0) * x)

    (grad,) = analytic_grads(fn, [x])
    assert relative_error(grad, numeric_grad(fn, x)) < 1e-3


def test_clamp_min_subgradient_below_threshold():
    x = Tensor(np.array([-1.0, 2.0]).reshape(1, 1, 1, 2))
    (grad,) = analytic_grads(lambda: reduce_sum(elementwise("clamp_min", x, threshold=0.5)), [x])
    np.testing.assert_array_equal(grad.ravel(), [0.0, 1.0])


@pytest.mark.parametrize("op", ["add", "sub", "mul", "div"])
def test_binary_gradients_with_broadcast(float64, rng, op):
    a = random_tensor(rng, (2, 3, 4, 4))
    b = Tensor(rng.uniform(0.5, 2.0, size=(2, 1, 4, 4)))

    def fn():
        return reduce_sum(elementwise(op, a, b) * a)

    grads = analytic_grads(fn, [a, b])
    for tensor, grad in zip([a, b], grads):
        assert relative_error(grad, numeric_grad(fn, tensor)) < 1e-3


def test_reduce_mean_values():
    assert reduce_mean(Tensor.zeros((1, 2, 3, 3))).item() == 0.0
    x = Tensor(np.array([1.0, 2.0, 3.0, 4.0]).reshape(1, 1, 2, 2))
    assert reduce_mean(x).item() == pytest.approx(2.5)


def test_reduce_mean_uniform_gradient():
    x = Tensor(np.ones((1, 2, 2, 2)))
    (grad,) = analytic_grads(lambda: reduce_mean(x), [x])
    np.testing.assert_allclose(grad, np.full((1, 2, 2, 2), 1 / 8))


def test_reduce_mean_partial_axes():
    x = Tensor(np.arange(8, dtype=np.float32).reshape(2, 1, 2, 2))
    out = reduce_mean(x, over=(1, 2, 3))
    np.testing.assert_allclose(out.data.ravel(), [1.5, 5.5])


def test_reduce_mean_empty_axes():
    with pytest.raises(ParameterError):
        reduce_mean(Tensor.ones((1, 1, 1, 1)), over=())


def test_backward_linear_case(rng):
    x = rng.normal(size=(1, 2, 3, 3)).astype(np.float32)
    w = Tensor(np.zeros_like(x))
    (grad,) = analytic_grads(lambda: reduce_sum(w * Tensor(x)), [w])
    np.testing.assert_allclose(grad, x)


def test_backward_twice_is_an_error():
    w = Tensor(np.ones((1, 1, 2, 2)), requires_grad=True)
    with Tape():
        loss = reduce_sum(w * w)
    backward(loss)
    with pytest.raises(ContractError):
        backward(loss)


def test_backward_requires_scalar():
    w = Tensor(np.ones((1, 1, 2, 2)), requires_grad=True)
    with Tape():
        out = w * w
    with pytest.raises(ContractError):
        backward(out)


def test_composite_graph_gradient(float64, rng):
    x = random_tensor(rng, (2, 3, 8, 8))
    w = random_tensor(rng, (4, 3, 3, 3), scale=0.3)
    b = Tensor(away_from_zero(rng.normal(size=(1, 4, 1, 1))))

    def fn():
        return reduce_mean(relu(conv2d(x, w, b, stride=1, padding=1)))

    grads = analytic_grads(fn, [w, b])
    for tensor, grad in zip([w, b], grads):
        assert relative_error(grad, numeric_grad(fn, tensor)) < 1e-3


def test_tape_records_in_order_and_clears():
    w = Tensor(np.ones((1, 1, 2, 2)), requires_grad=True)
    with Tape() as tape:
        loss = reduce_sum(softplus(w * 2.0))
    assert [node.name for node in tape.entries] == ["mul", "softplus", "reduce_sum"]
    backward(loss)
    assert len(tape) == 0


def test_no_recording_outside_tape():
    w = Tensor(np.ones((1, 1, 2, 2)), requires_grad=True)
    out = w * w
    assert out.node is None


def test_concat_and_crop_gradients(float64, rng):
    a = random_tensor(rng, (1, 2, 4, 4))
    b = random_tensor(rng, (1, 1, 4, 4))
    weights = rng.normal(size=(1, 2, 2, 3))

    def fn():
        return reduce_sum(crop(concat([a, b]), c=(1, 3), h=(1, 3), w=(0, 3)) * weights)

    grads = analytic_grads(fn, [a, b])
    for tensor, grad in zip([a, b], grads):
        assert relative_error(grad, numeric_grad(fn, tensor)) < 1e-6


def test_forward_is_deterministic(rng):
    x = random_tensor(rng, (2, 3, 8, 8))
    w = random_tensor(rng, (4, 3, 3, 3))
    first = conv2d(x, w, None, 2, 1).data.tobytes()
    second = conv2d(x, w, None, 2, 1).data.tobytes()
    assert first == second


def test_non_finite_forward_is_an_error():
    with pytest.raises(NumericError):
        elementwise("exp", Tensor(np.full((1, 1, 1, 1), 1e6)))


def test_tensor_must_be_4d():
    with pytest.raises(DimensionError):
        Tensor(np.ones((2, 2)))
