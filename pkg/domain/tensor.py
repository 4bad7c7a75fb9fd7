"""Dense tensor kernels.

Tensors are plain ``numpy.ndarray`` values in row-major order. Every public
kernel validates shapes up front, keeps the dtype of its inputs (float64 in
the gradient tests, float32 allowed for training) and refuses to hand back
NaN or Inf.

Convolutions follow the cross-correlation convention (no kernel flip) and use
3x3 kernels laid out as ``[out_channels, in_channels, 3, 3]``.
"""

from enum import IntEnum
from typing import Callable, Dict, Tuple

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from scipy import special

from domain.exceptions import DimensionError, NonFiniteError

Tensor = np.ndarray

KERNEL_SIZE = 3
_MASK64 = (1 << 64) - 1


def check_finite(x: Tensor, name: str = "tensor") -> Tensor:
    if not np.all(np.isfinite(x)):
        raise NonFiniteError(f"{name} contains NaN or Inf")
    return x


# ---------------------------------------------------------------------------
# Dense algebra
# ---------------------------------------------------------------------------

def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product of a [m x k] and b [k x n]"""
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise DimensionError(f"matmul: cannot multiply {a.shape} by {b.shape}")
    return check_finite(a @ b, "matmul")


# ---------------------------------------------------------------------------
# Convolution (im2col + matmul)
# ---------------------------------------------------------------------------

def conv_output_size(size: int, stride: int, padding: int, strict: bool = True) -> int:
    span = size + 2 * padding - KERNEL_SIZE
    if stride < 1 or span < 0:
        raise DimensionError(f"conv: size {size} with padding {padding} is smaller than the kernel")
    if strict and span % stride:
        raise DimensionError(
            f"conv: ({size} + 2*{padding} - {KERNEL_SIZE}) / {stride} is not integral"
        )
    return span // stride + 1


def _check_conv_operands(x: Tensor, kernel: Tensor) -> None:
    if x.ndim != 4:
        raise DimensionError(f"conv: input must be B x C x H x W, got {x.shape}")
    if kernel.ndim != 4 or kernel.shape[2:] != (KERNEL_SIZE, KERNEL_SIZE):
        raise DimensionError(f"conv: kernel must be F x C x 3 x 3, got {kernel.shape}")
    if kernel.shape[1] != x.shape[1]:
        raise DimensionError(f"conv: kernel {kernel.shape} does not match {x.shape[1]} input channels")


def _im2col(x: Tensor, stride: int, padding: int) -> Tuple[Tensor, int, int]:
    """Return the [B*Ho*Wo, C*9] patch matrix and the output extents"""
    if padding:
        x = np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    windows = sliding_window_view(x, (KERNEL_SIZE, KERNEL_SIZE), axis=(2, 3))
    windows = windows[:, :, ::stride, ::stride]
    b, c, ho, wo = windows.shape[:4]
    cols = windows.transpose(0, 2, 3, 1, 4, 5).reshape(b * ho * wo, c * KERNEL_SIZE * KERNEL_SIZE)
    return cols, ho, wo


def _conv_raw(x: Tensor, kernel: Tensor, stride: int, padding: int) -> Tensor:
    cols, ho, wo = _im2col(x, stride, padding)
    f = kernel.shape[0]
    out = cols @ kernel.reshape(f, -1).T
    return np.ascontiguousarray(out.reshape(x.shape[0], ho, wo, f).transpose(0, 3, 1, 2))


def _scatter_cols(upstream: Tensor, kernel: Tensor, input_shape: Tuple[int, ...],
                  stride: int, padding: int) -> Tensor:
    """col2im: route each output position's gradient back onto its input patch"""
    b, c, h, w = input_shape
    f = kernel.shape[0]
    _, _, ho, wo = upstream.shape
    dcols = upstream.transpose(0, 2, 3, 1).reshape(-1, f) @ kernel.reshape(f, -1)
    dcols = dcols.reshape(b, ho, wo, c, KERNEL_SIZE, KERNEL_SIZE).transpose(0, 3, 1, 2, 4, 5)
    grad = np.zeros((b, c, h + 2 * padding, w + 2 * padding), dtype=dcols.dtype)
    row_span = stride * (ho - 1) + 1
    col_span = stride * (wo - 1) + 1
    # Fixed loop order keeps the accumulation deterministic.
    for i in range(KERNEL_SIZE):
        for j in range(KERNEL_SIZE):
            grad[:, :, i:i + row_span:stride, j:j + col_span:stride] += dcols[..., i, j]
    return grad[:, :, padding:padding + h, padding:padding + w]


def _kernel_grad(x: Tensor, upstream: Tensor, stride: int, padding: int) -> Tensor:
    cols, _, _ = _im2col(x, stride, padding)
    f = upstream.shape[1]
    grad = upstream.transpose(0, 2, 3, 1).reshape(-1, f).T @ cols
    return grad.reshape(f, x.shape[1], KERNEL_SIZE, KERNEL_SIZE)


def conv2d_forward(x: Tensor, kernel: Tensor, stride: int = 1, padding: int = 0) -> Tensor:
    _check_conv_operands(x, kernel)
    conv_output_size(x.shape[2], stride, padding)
    conv_output_size(x.shape[3], stride, padding)
    return check_finite(_conv_raw(x, kernel, stride, padding), "conv2d")


def conv2d_grads(x: Tensor, kernel: Tensor, upstream: Tensor,
                 stride: int = 1, padding: int = 0) -> Tuple[Tensor, Tensor]:
    """Gradients of conv2d_forward with respect to its input and its kernel"""
    _check_conv_operands(x, kernel)
    expected = (x.shape[0], kernel.shape[0],
                conv_output_size(x.shape[2], stride, padding),
                conv_output_size(x.shape[3], stride, padding))
    if upstream.shape != expected:
        raise DimensionError(f"conv2d_grads: upstream {upstream.shape} != output {expected}")
    grad_input = _scatter_cols(upstream, kernel, x.shape, stride, padding)
    grad_kernel = _kernel_grad(x, upstream, stride, padding)
    return check_finite(grad_input, "conv2d grad_input"), check_finite(grad_kernel, "conv2d grad_kernel")


def conv2d_kernel_grad(x: Tensor, upstream: Tensor, stride: int = 1, padding: int = 0) -> Tensor:
    """Kernel half of conv2d_grads, for updates that never need the input gradient.

    Output positions follow the floor rule, so it also serves the adjoint
    (transposed) convolution with the roles of ``x`` and ``upstream`` swapped.
    """
    cols_hw = (conv_output_size(x.shape[2], stride, padding, strict=False),
               conv_output_size(x.shape[3], stride, padding, strict=False))
    if upstream.ndim != 4 or upstream.shape[0] != x.shape[0] or upstream.shape[2:] != cols_hw:
        raise DimensionError(f"conv2d_kernel_grad: upstream {upstream.shape} does not fit input {x.shape}")
    return check_finite(_kernel_grad(x, upstream, stride, padding), "conv2d grad_kernel")


def conv_transpose2d_forward(x: Tensor, kernel: Tensor, stride: int, padding: int,
                             output_hw: Tuple[int, int]) -> Tensor:
    """Adjoint of conv2d.

    ``kernel`` is ``[C_in, C_out, 3, 3]``: the kernel of the conv2d that maps a
    ``C_out x H x W`` image to ``x``. ``output_hw`` fixes the spatial size,
    which stride > 1 leaves ambiguous.
    """
    if x.ndim != 4 or kernel.ndim != 4 or kernel.shape[0] != x.shape[1]:
        raise DimensionError(f"conv_transpose2d: input {x.shape} does not match kernel {kernel.shape}")
    h, w = output_hw
    if (conv_output_size(h, stride, padding, strict=False),
            conv_output_size(w, stride, padding, strict=False)) != x.shape[2:]:
        raise DimensionError(f"conv_transpose2d: cannot reach {output_hw} from {x.shape[2:]}")
    out = _scatter_cols(x, kernel, (x.shape[0], kernel.shape[1], h, w), stride, padding)
    return check_finite(np.ascontiguousarray(out), "conv_transpose2d")


def conv_transpose2d_grads(x: Tensor, kernel: Tensor, upstream: Tensor,
                           stride: int, padding: int) -> Tuple[Tensor, Tensor]:
    if upstream.ndim != 4 or upstream.shape[:2] != (x.shape[0], kernel.shape[1]):
        raise DimensionError(f"conv_transpose2d_grads: upstream {upstream.shape} does not match")
    grad_input = _conv_raw(upstream, kernel, stride, padding)
    if grad_input.shape != x.shape:
        raise DimensionError(f"conv_transpose2d_grads: upstream {upstream.shape} does not match input {x.shape}")
    grad_kernel = _kernel_grad(upstream, x, stride, padding)
    return check_finite(grad_input, "conv_transpose2d grad_input"), check_finite(grad_kernel, "conv_transpose2d grad_kernel")


# ---------------------------------------------------------------------------
# Pooling
# ---------------------------------------------------------------------------

def _pool_windows(x: Tensor) -> Tensor:
    b, c, h, w = x.shape
    return x.reshape(b, c, h // 2, 2, w // 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(b, c, h // 2, w // 2, 4)


def maxpool2x2(x: Tensor) -> Tuple[Tensor, Tensor]:
    """2x2 max pooling with stride 2.

    The mask holds the winner's index (0..3) in row-major window order; ties
    go to the first index.
    """
    if x.ndim != 4 or x.shape[2] % 2 or x.shape[3] % 2:
        raise DimensionError(f"maxpool2x2: need B x C x H x W with even H, W, got {x.shape}")
    windows = _pool_windows(x)
    mask = windows.argmax(axis=-1)
    out = np.take_along_axis(windows, mask[..., None], axis=-1)[..., 0]
    return check_finite(out, "maxpool2x2"), mask


def maxpool2x2_backward(upstream: Tensor, mask: Tensor) -> Tensor:
    if upstream.shape != mask.shape:
        raise DimensionError(f"maxpool2x2_backward: upstream {upstream.shape} != mask {mask.shape}")
    b, c, h2, w2 = upstream.shape
    routed = np.zeros((b, c, h2, w2, 4), dtype=upstream.dtype)
    np.put_along_axis(routed, mask[..., None], upstream[..., None], axis=-1)
    return routed.reshape(b, c, h2, w2, 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(b, c, 2 * h2, 2 * w2)


# ---------------------------------------------------------------------------
# Elementwise maps
# ---------------------------------------------------------------------------

def elu(x: Tensor) -> Tensor:
    return np.where(x > 0, x, np.expm1(np.minimum(x, 0)))


def elu_derivative(z: Tensor) -> Tensor:
    return np.where(z > 0, np.ones_like(z), np.exp(np.minimum(z, 0)))


def tanh(x: Tensor) -> Tensor:
    return np.tanh(x)


def tanh_derivative(z: Tensor) -> Tensor:
    return 1.0 - np.tanh(z) ** 2


def softmax_rowwise(x: Tensor) -> Tensor:
    if x.ndim != 2:
        raise DimensionError(f"softmax_rowwise: need a rank-2 input, got {x.shape}")
    return special.softmax(x, axis=1)


ELEMENTWISE_MAPS: Dict[str, Callable[[Tensor], Tensor]] = {
    "elu": elu,
    "tanh": tanh,
    "elu_derivative": elu_derivative,
    "tanh_derivative": tanh_derivative,
    "softmax_rowwise": softmax_rowwise,
}


def elementwise(name: str, x: Tensor) -> Tensor:
    try:
        fn = ELEMENTWISE_MAPS[name]
    except KeyError:
        raise ValueError(f"unknown elementwise map '{name}'") from None
    return check_finite(fn(x), name)


# ---------------------------------------------------------------------------
# Random numbers
# ---------------------------------------------------------------------------

class RngStream(IntEnum):
    """Fixed sub-stream offsets derived from one seed"""
    ROOT = 0
    INIT = 1
    FEEDBACK = 2
    SHUFFLE = 3
    AUGMENT = 4
    SPLIT = 5


class Rng:
    """Seedable generator built on numpy's Philox4x64 counter-based bit generator.

    The 128-bit Philox key is ``(stream << 64) | seed``, so a (seed, stream)
    pair always yields the same raw stream on every platform.
    """

    def __init__(self, seed: int, stream: int = RngStream.ROOT):
        if seed < 0:
            raise ValueError(f"seed must be non-negative, got {seed}")
        self.seed = int(seed)
        self.stream = int(stream)
        key = (self.stream << 64) | (self.seed & _MASK64)
        self._gen = np.random.Generator(np.random.Philox(key=key))

    def derive(self, stream: int) -> "Rng":
        return Rng(self.seed, stream)

    def raw(self, n: int) -> np.ndarray:
        """Next n raw 64-bit words"""
        return self._gen.bit_generator.random_raw(n)

    def uniform(self, low: float, high: float, shape) -> np.ndarray:
        return self._gen.uniform(low, high, shape)

    def normal(self, mean: float, std: float, shape) -> np.ndarray:
        return self._gen.normal(mean, std, shape)

    def integers(self, low: int, high: int, size=None) -> np.ndarray:
        return self._gen.integers(low, high, size)

    def random(self, size=None) -> np.ndarray:
        return self._gen.random(size)

    def permutation(self, n: int) -> np.ndarray:
        return self._gen.permutation(n)
