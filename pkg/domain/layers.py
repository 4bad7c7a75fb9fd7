"""Parameterized layers shared by the forward and the feedback networks.

A layer is plain data plus two pure operations: ``forward`` returns the
pre-activation and the activation, ``backward`` turns a gradient on the
activation into parameter gradients (and, when asked, an input gradient).
The input is always treated as a constant, which is how the stop-gradient of
the layer-local rule is realized.
"""

import dataclasses
import math
from dataclasses import dataclass
from typing import Dict, Optional, Tuple, Union

import numpy as np
from scipy import linalg

from domain.exceptions import DimensionError
from domain.tensor import (
    Rng,
    Tensor,
    check_finite,
    conv2d_forward,
    conv2d_grads,
    conv2d_kernel_grad,
    conv_transpose2d_forward,
    conv_transpose2d_grads,
    elementwise,
    matmul,
    maxpool2x2,
    maxpool2x2_backward,
)

ACTIVATIONS = ("elu", "tanh", "none")
INIT_SCHEMES = ("kaiming_uniform", "xavier_uniform", "orthogonal")

Grads = Dict[str, Tensor]


def activate(name: str, z: Tensor) -> Tensor:
    if name == "none":
        return z
    return elementwise(name, z)


def activation_derivative(name: str, z: Tensor) -> Tensor:
    if name == "none":
        return np.ones_like(z)
    return elementwise(f"{name}_derivative", z)


@dataclass
class LinearLayer:
    """Affine map ``z = x W^T + b`` followed by an activation.

    Inputs of any rank are flattened to ``B x in``; ``out_shape`` reshapes the
    output, which the CNN feedback entry uses to reach the conv feature map.
    """

    weight: Tensor
    bias: Tensor
    activation: str = "elu"
    out_shape: Optional[Tuple[int, ...]] = None

    def __post_init__(self):
        if self.weight.ndim != 2 or self.bias.shape != (self.weight.shape[0],):
            raise DimensionError(f"linear: weight {self.weight.shape} and bias {self.bias.shape} disagree")
        if self.out_shape is not None and math.prod(self.out_shape) != self.weight.shape[0]:
            raise DimensionError(f"linear: out_shape {self.out_shape} does not hold {self.weight.shape[0]} units")
        if self.activation not in ACTIVATIONS:
            raise ValueError(f"unknown activation '{self.activation}'")

    @property
    def in_features(self) -> int:
        return self.weight.shape[1]

    @property
    def out_features(self) -> int:
        return self.weight.shape[0]

    @property
    def output_shape(self) -> Tuple[int, ...]:
        return self.out_shape or (self.out_features,)

    def parameters(self) -> Dict[str, Tensor]:
        return {"weight": self.weight, "bias": self.bias}

    def forward(self, x: Tensor) -> Tuple[Tensor, Tensor]:
        flat = x.reshape(x.shape[0], -1)
        if flat.shape[1] != self.in_features:
            raise DimensionError(f"linear: input {x.shape} does not have {self.in_features} features")
        z = matmul(flat, self.weight.T) + self.bias
        z = z.reshape((x.shape[0],) + self.output_shape)
        return z, activate(self.activation, z)

    def backward(self, x: Tensor, grad_a: Tensor, pre_activation: Optional[Tensor] = None,
                 feedback_weight: Optional[Tensor] = None,
                 need_input_grad: bool = False) -> Tuple[Grads, Optional[Tensor]]:
        z = self.forward(x)[0] if pre_activation is None else pre_activation
        if grad_a.shape != z.shape:
            raise DimensionError(f"linear: gradient {grad_a.shape} does not match activation {z.shape}")
        flat = x.reshape(x.shape[0], -1)
        grad_z = (grad_a * activation_derivative(self.activation, z)).reshape(x.shape[0], -1)
        grads = {"weight": matmul(grad_z.T, flat), "bias": grad_z.sum(axis=0)}
        grad_input = None
        if need_input_grad:
            w = self.weight if feedback_weight is None else feedback_weight
            grad_input = matmul(grad_z, w).reshape(x.shape)
        return grads, grad_input


@dataclass
class ConvBlock:
    """3x3 convolution, activation, then optional 2x2 max pooling"""

    kernel: Tensor
    bias: Tensor
    pool: str = "maxpool2x2"
    activation: str = "elu"
    stride: int = 1
    padding: int = 1

    def __post_init__(self):
        if self.kernel.ndim != 4 or self.kernel.shape[2:] != (3, 3):
            raise DimensionError(f"conv block: kernel must be F x C x 3 x 3, got {self.kernel.shape}")
        if self.bias.shape != (self.kernel.shape[0],):
            raise DimensionError(f"conv block: bias {self.bias.shape} does not match kernel {self.kernel.shape}")
        if self.pool not in ("maxpool2x2", "none"):
            raise ValueError(f"unknown pool '{self.pool}'")

    def parameters(self) -> Dict[str, Tensor]:
        return {"kernel": self.kernel, "bias": self.bias}

    def forward(self, x: Tensor) -> Tuple[Tensor, Tensor]:
        z = conv2d_forward(x, self.kernel, self.stride, self.padding) + self.bias[None, :, None, None]
        h = activate(self.activation, z)
        if self.pool == "maxpool2x2":
            h, _ = maxpool2x2(h)
        return z, h

    def backward(self, x: Tensor, grad_a: Tensor, pre_activation: Optional[Tensor] = None,
                 feedback_weight: Optional[Tensor] = None,
                 need_input_grad: bool = False) -> Tuple[Grads, Optional[Tensor]]:
        z = self.forward(x)[0] if pre_activation is None else pre_activation
        grad_h = grad_a
        if self.pool == "maxpool2x2":
            pooled, mask = maxpool2x2(activate(self.activation, z))
            if grad_a.shape != pooled.shape:
                raise DimensionError(f"conv block: gradient {grad_a.shape} does not match activation {pooled.shape}")
            grad_h = maxpool2x2_backward(grad_a, mask)
        elif grad_a.shape != z.shape:
            raise DimensionError(f"conv block: gradient {grad_a.shape} does not match activation {z.shape}")
        grad_z = grad_h * activation_derivative(self.activation, z)
        if need_input_grad:
            kernel = self.kernel if feedback_weight is None else feedback_weight
            grad_input, _ = conv2d_grads(x, kernel, grad_z, self.stride, self.padding)
        else:
            grad_input = None
        grads = {
            "kernel": conv2d_kernel_grad(x, grad_z, self.stride, self.padding),
            "bias": grad_z.sum(axis=(0, 2, 3)),
        }
        return grads, grad_input


@dataclass
class FeedbackConvBlock:
    """Stride-``upsample_factor`` transposed 3x3 convolution plus activation.

    ``kernel`` is stored ``[C_out, C_in, 3, 3]`` like every other weight, so a
    block mirroring a ``C -> F`` ConvBlock holds a ``C x F x 3 x 3`` kernel and
    its transpose over the first two axes has the forward kernel's shape.
    """

    kernel: Tensor
    bias: Tensor
    output_hw: Tuple[int, int]
    upsample_factor: int = 2
    activation: str = "elu"
    padding: int = 1

    def __post_init__(self):
        if self.kernel.ndim != 4 or self.kernel.shape[2:] != (3, 3):
            raise DimensionError(f"feedback conv: kernel must be C x F x 3 x 3, got {self.kernel.shape}")
        if self.bias.shape != (self.kernel.shape[0],):
            raise DimensionError(f"feedback conv: bias {self.bias.shape} does not match kernel {self.kernel.shape}")
        self.output_hw = tuple(self.output_hw)

    @property
    def _adjoint(self) -> Tensor:
        return self.kernel.transpose(1, 0, 2, 3)

    def parameters(self) -> Dict[str, Tensor]:
        return {"kernel": self.kernel, "bias": self.bias}

    def forward(self, x: Tensor) -> Tuple[Tensor, Tensor]:
        z = conv_transpose2d_forward(x, self._adjoint, self.upsample_factor, self.padding, self.output_hw)
        z = z + self.bias[None, :, None, None]
        return z, activate(self.activation, z)

    def backward(self, x: Tensor, grad_a: Tensor, pre_activation: Optional[Tensor] = None,
                 feedback_weight: Optional[Tensor] = None,
                 need_input_grad: bool = False) -> Tuple[Grads, Optional[Tensor]]:
        z = self.forward(x)[0] if pre_activation is None else pre_activation
        if grad_a.shape != z.shape:
            raise DimensionError(f"feedback conv: gradient {grad_a.shape} does not match activation {z.shape}")
        grad_z = grad_a * activation_derivative(self.activation, z)
        grad_input = None
        if need_input_grad:
            adjoint = self._adjoint if feedback_weight is None else feedback_weight.transpose(1, 0, 2, 3)
            grad_input, _ = conv_transpose2d_grads(x, adjoint, grad_z, self.upsample_factor, self.padding)
        grad_adjoint = conv2d_kernel_grad(grad_z, x, self.upsample_factor, self.padding)
        grads = {"kernel": grad_adjoint.transpose(1, 0, 2, 3), "bias": grad_z.sum(axis=(0, 2, 3))}
        return grads, grad_input


Layer = Union[LinearLayer, ConvBlock, FeedbackConvBlock]


def layer_forward(layer: Layer, x: Tensor) -> Tuple[Tensor, Tensor]:
    return layer.forward(x)


def layer_local_grads(layer: Layer, x: Tensor, grad_a: Tensor,
                      pre_activation: Optional[Tensor] = None) -> Tuple[Tensor, Tensor]:
    """(grad_weight, grad_bias) of a loss on the layer's activation, input held fixed"""
    grads, _ = layer.backward(x, grad_a, pre_activation)
    weight_name, bias_name = layer.parameters()
    return check_finite(grads[weight_name], "grad_weight"), check_finite(grads[bias_name], "grad_bias")


def weight_of(layer: Layer) -> Tensor:
    return layer.weight if isinstance(layer, LinearLayer) else layer.kernel


def _fans(weight: Tensor) -> Tuple[int, int]:
    receptive = math.prod(weight.shape[2:]) if weight.ndim > 2 else 1
    return weight.shape[1] * receptive, weight.shape[0] * receptive


def init_weights(layer: Layer, scheme: str, rng: Rng, dtype=np.float64) -> Layer:
    """Fresh weights for ``layer`` (biases are zeroed); the input layer is not modified.

    Orthogonal init works on the ``[out x in*9]`` flattening of conv kernels.
    """
    weight = weight_of(layer)
    fan_in, fan_out = _fans(weight)
    if scheme == "kaiming_uniform":
        bound = math.sqrt(6.0 / fan_in)
        values = rng.uniform(-bound, bound, weight.shape)
    elif scheme == "xavier_uniform":
        bound = math.sqrt(6.0 / (fan_in + fan_out))
        values = rng.uniform(-bound, bound, weight.shape)
    elif scheme == "orthogonal":
        rows = weight.shape[0]
        cols = weight.size // rows
        gaussian = rng.normal(0.0, 1.0, (max(rows, cols), min(rows, cols)))
        q, r = linalg.qr(gaussian, mode="economic")
        q = q * np.sign(np.diag(r))
        values = (q if rows >= cols else q.T).reshape(weight.shape)
    else:
        raise ValueError(f"unknown init scheme '{scheme}'")
    new_weight = np.ascontiguousarray(values, dtype=dtype)
    new_bias = np.zeros(layer.bias.shape, dtype=dtype)
    if isinstance(layer, LinearLayer):
        return dataclasses.replace(layer, weight=new_weight, bias=new_bias)
    return dataclasses.replace(layer, kernel=new_weight, bias=new_bias)
