import math

import numpy as np
import pytest
from numpy.testing import assert_allclose

from domain.exceptions import DimensionError
from domain.layers import (
    ConvBlock,
    FeedbackConvBlock,
    LinearLayer,
    init_weights,
    layer_local_grads,
    weight_of,
)
from domain.tensor import Rng
from tests.helpers import numerical_grad, rel_error


def _check_backward(layer, x, np_rng, params):
    """Compare backward() against central differences of sum(a * w) for a random w"""
    _, a = layer.forward(x)
    upstream = np_rng.normal(size=a.shape)

    def loss():
        return float(np.sum(layer.forward(x)[1] * upstream))

    grads, grad_input = layer.backward(x, upstream, need_input_grad=True)
    for name in params:
        assert rel_error(grads[name], numerical_grad(loss, getattr(layer, name))) < 1e-5, name
    assert rel_error(grad_input, numerical_grad(loss, x)) < 1e-5


class TestLinearLayer:
    @pytest.mark.parametrize("activation", ["elu", "tanh", "none"])
    def test_backward_matches_finite_differences(self, np_rng, activation):
        layer = LinearLayer(np_rng.normal(size=(4, 6)), np_rng.normal(size=4), activation)
        _check_backward(layer, np_rng.normal(size=(3, 6)), np_rng, ("weight", "bias"))

    def test_out_shape_reshapes_output(self, np_rng):
        layer = LinearLayer(np_rng.normal(size=(8, 3)), np.zeros(8), "elu", out_shape=(2, 2, 2))
        z, a = layer.forward(np_rng.normal(size=(5, 3)))
        assert z.shape == a.shape == (5, 2, 2, 2)

    def test_feedback_weight_replaces_weight_for_input_grad(self, np_rng):
        layer = LinearLayer(np_rng.normal(size=(4, 6)), np.zeros(4), "none")
        x = np_rng.normal(size=(3, 6))
        upstream = np_rng.normal(size=(3, 4))
        fixed = np_rng.normal(size=(4, 6))
        grads, grad_input = layer.backward(x, upstream, feedback_weight=fixed, need_input_grad=True)
        assert_allclose(grad_input, upstream @ fixed)
        assert_allclose(grads["weight"], upstream.T @ x)

    def test_bad_shapes(self, np_rng):
        with pytest.raises(DimensionError):
            LinearLayer(np.zeros((4, 6)), np.zeros(5))
        layer = LinearLayer(np.zeros((4, 6)), np.zeros(4))
        with pytest.raises(DimensionError):
            layer.forward(np.zeros((2, 5)))
        with pytest.raises(DimensionError):
            layer.backward(np.zeros((2, 6)), np.zeros((2, 3)))

    def test_unknown_activation(self):
        with pytest.raises(ValueError):
            LinearLayer(np.zeros((2, 2)), np.zeros(2), "relu")


class TestConvBlock:
    @pytest.mark.parametrize("pool", ["maxpool2x2", "none"])
    def test_backward_matches_finite_differences(self, np_rng, pool):
        block = ConvBlock(np_rng.normal(size=(3, 2, 3, 3)) * 0.5, np_rng.normal(size=3), pool, "elu")
        _check_backward(block, np_rng.normal(size=(2, 2, 4, 4)), np_rng, ("kernel", "bias"))

    def test_pooled_output_shape(self, np_rng):
        block = ConvBlock(np_rng.normal(size=(5, 3, 3, 3)), np.zeros(5))
        z, h = block.forward(np_rng.normal(size=(2, 3, 8, 8)))
        assert z.shape == (2, 5, 8, 8)
        assert h.shape == (2, 5, 4, 4)

    def test_gradient_shape_checked(self, np_rng):
        block = ConvBlock(np_rng.normal(size=(3, 2, 3, 3)), np.zeros(3))
        with pytest.raises(DimensionError):
            block.backward(np_rng.normal(size=(1, 2, 4, 4)), np.zeros((1, 3, 4, 4)))


class TestFeedbackConvBlock:
    def test_backward_matches_finite_differences(self, np_rng):
        block = FeedbackConvBlock(np_rng.normal(size=(2, 3, 3, 3)) * 0.5, np_rng.normal(size=2), (4, 4), 2, "tanh")
        _check_backward(block, np_rng.normal(size=(2, 3, 2, 2)), np_rng, ("kernel", "bias"))

    def test_upsamples_to_output_hw(self, np_rng):
        block = FeedbackConvBlock(np_rng.normal(size=(4, 6, 3, 3)), np.zeros(4), (8, 8))
        z, a = block.forward(np_rng.normal(size=(3, 6, 4, 4)))
        assert a.shape == (3, 4, 8, 8)

    def test_kernel_transpose_matches_forward_conv_shape(self, np_rng):
        block = FeedbackConvBlock(np_rng.normal(size=(4, 6, 3, 3)), np.zeros(4), (8, 8))
        mirrored = ConvBlock(np.zeros((6, 4, 3, 3)), np.zeros(6))
        assert block.kernel.transpose(1, 0, 2, 3).shape == mirrored.kernel.shape


class TestLocalGrads:
    def test_returns_weight_and_bias(self, np_rng):
        layer = LinearLayer(np_rng.normal(size=(4, 6)), np.zeros(4), "elu")
        x = np_rng.normal(size=(3, 6))
        gw, gb = layer_local_grads(layer, x, np.ones((3, 4)))
        assert gw.shape == (4, 6)
        assert gb.shape == (4,)

    def test_does_not_depend_on_other_layers(self, np_rng):
        layer = LinearLayer(np_rng.normal(size=(4, 6)), np.zeros(4), "elu")
        x = np_rng.normal(size=(3, 6))
        upstream = np_rng.normal(size=(3, 4))
        first = layer_local_grads(layer, x, upstream)
        second = layer_local_grads(layer, x.copy(), upstream.copy())
        for a, b in zip(first, second):
            np.testing.assert_array_equal(a, b)


class TestInit:
    def test_kaiming_bound(self, rng):
        layer = init_weights(LinearLayer(np.zeros((50, 40)), np.ones(50)), "kaiming_uniform", rng)
        assert np.abs(layer.weight).max() <= math.sqrt(6.0 / 40)
        assert not layer.bias.any()

    def test_xavier_bound_for_conv(self, rng):
        block = init_weights(ConvBlock(np.zeros((8, 4, 3, 3)), np.zeros(8)), "xavier_uniform", rng)
        assert np.abs(block.kernel).max() <= math.sqrt(6.0 / (4 * 9 + 8 * 9))

    @pytest.mark.parametrize("shape", [(10, 4), (4, 10)])
    def test_orthogonal(self, rng, shape):
        w = weight_of(init_weights(LinearLayer(np.zeros(shape), np.zeros(shape[0])), "orthogonal", rng))
        gram = w.T @ w if shape[0] >= shape[1] else w @ w.T
        assert_allclose(gram, np.eye(min(shape)), atol=1e-10)

    def test_orthogonal_conv_flattening(self, rng):
        block = init_weights(ConvBlock(np.zeros((4, 2, 3, 3)), np.zeros(4)), "orthogonal", rng)
        flat = block.kernel.reshape(4, -1)
        assert_allclose(flat @ flat.T, np.eye(4), atol=1e-10)

    def test_dtype_and_determinism(self):
        layer = LinearLayer(np.zeros((3, 3)), np.zeros(3))
        a = init_weights(layer, "kaiming_uniform", Rng(3), np.float32)
        b = init_weights(layer, "kaiming_uniform", Rng(3), np.float32)
        assert a.weight.dtype == np.float32
        np.testing.assert_array_equal(a.weight, b.weight)

    def test_unknown_scheme(self, rng):
        with pytest.raises(ValueError):
            init_weights(LinearLayer(np.zeros((2, 2)), np.zeros(2)), "he_normal", rng)
