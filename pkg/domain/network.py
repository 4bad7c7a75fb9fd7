"""Dual network: a forward stack x -> logits and an anti-parallel feedback stack y -> input space"""

import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from functools import cached_property
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from domain.exceptions import DimensionError
from domain.layers import (
    ConvBlock,
    FeedbackConvBlock,
    Layer,
    LinearLayer,
    init_weights,
)
from domain.tensor import Rng, Tensor

logger = logging.getLogger(__name__)

Shape = Tuple[int, ...]


@dataclass
class DualNetwork:
    """Forward layers g_1..g_L and feedback layers h_1..h_L.

    ``feedback_layers[l - 1]`` is h_l, mapping layer-l shapes back to layer
    l-1 shapes; the feedback pass runs them from h_L down to h_1.
    """

    forward_layers: List[Layer]
    feedback_layers: List[Layer]
    layer_shapes: List[Shape]
    kind: str = "mlp"

    def __post_init__(self):
        if len(self.forward_layers) < 2:
            raise DimensionError(f"a dual network needs at least 2 layers, got {len(self.forward_layers)}")
        if len(self.feedback_layers) != len(self.forward_layers):
            raise DimensionError("forward and feedback stacks must have the same depth")
        if len(self.layer_shapes) != len(self.forward_layers) + 1:
            raise DimensionError("layer_shapes must list L + 1 shapes")
        self.layer_shapes = [tuple(s) for s in self.layer_shapes]

    @property
    def num_layers(self) -> int:
        return len(self.forward_layers)

    @property
    def layer_dims(self) -> List[int]:
        return [math.prod(s) for s in self.layer_shapes]

    @property
    def input_shape(self) -> Shape:
        return self.layer_shapes[0]

    @property
    def num_classes(self) -> int:
        return self.layer_dims[-1]

    def named_parameters(self, tag: str) -> Dict[str, Tensor]:
        """Flat ``{"<layer index>.<name>": array}`` view of one stack; arrays are live references"""
        layers = self.forward_layers if tag == "forward" else self.feedback_layers
        return {f"{i + 1}.{name}": p for i, layer in enumerate(layers) for name, p in layer.parameters().items()}


@dataclass
class ActivationTrace:
    """Everything one batch produces in both stacks.

    The feedback stack is kept compact, one row per distinct target row;
    ``label_index`` maps every sample to its compact row. ``feedback_acts``
    expands it back to batch rows.
    """

    forward_acts: List[Tensor]
    forward_pre: List[Tensor]
    feedback_compact: List[Tensor]
    feedback_pre_compact: List[Tensor]
    label_index: np.ndarray = field(repr=False)

    @property
    def num_layers(self) -> int:
        return len(self.forward_acts) - 1

    @property
    def batch_size(self) -> int:
        return self.forward_acts[0].shape[0]

    @cached_property
    def feedback_acts(self) -> List[Tensor]:
        return [b[self.label_index] for b in self.feedback_compact]

    @cached_property
    def label_counts(self) -> np.ndarray:
        return np.bincount(self.label_index, minlength=self.feedback_compact[0].shape[0])


def build_mlp(dims: Sequence[int], rng: Rng, activation: str = "elu",
              init_scheme: str = "kaiming_uniform", dtype=np.float64) -> DualNetwork:
    """MLP pair with mirrored widths; logits and the input-space reconstruction stay linear"""
    dims = list(dims)
    if len(dims) < 3:
        raise DimensionError(f"need at least 2 layers (3 dims), got {dims}")
    if any(d < 1 for d in dims):
        raise DimensionError(f"layer widths must be positive, got {dims}")
    depth = len(dims) - 1
    forward, feedback = [], []
    for l in range(1, depth + 1):
        act = "none" if l == depth else activation
        layer = LinearLayer(np.zeros((dims[l], dims[l - 1])), np.zeros(dims[l]), act)
        forward.append(init_weights(layer, init_scheme, rng, dtype))
    for l in range(1, depth + 1):
        act = "none" if l == 1 else activation
        layer = LinearLayer(np.zeros((dims[l - 1], dims[l])), np.zeros(dims[l - 1]), act)
        feedback.append(init_weights(layer, init_scheme, rng, dtype))
    return DualNetwork(forward, feedback, [(d,) for d in dims], kind="mlp")


def build_cnn(input_shape: Shape, channels: Sequence[int], num_classes: int, rng: Rng,
              activation: str = "elu", init_scheme: str = "kaiming_uniform",
              dtype=np.float64) -> DualNetwork:
    """Pooled 3x3 conv blocks plus a linear head, mirrored by transposed convs"""
    c, h, w = input_shape
    factor = 2 ** len(channels)
    if h % factor or w % factor:
        raise DimensionError(f"spatial size {h}x{w} is not divisible by 2^{len(channels)}")
    shapes: List[Shape] = [(c, h, w)]
    for ch in channels:
        h, w = h // 2, w // 2
        shapes.append((ch, h, w))
    top = shapes[-1]

    forward: List[Layer] = []
    for (c_in, _, _), (c_out, _, _) in zip(shapes[:-1], shapes[1:]):
        block = ConvBlock(np.zeros((c_out, c_in, 3, 3)), np.zeros(c_out), "maxpool2x2", activation)
        forward.append(init_weights(block, init_scheme, rng, dtype))
    head = LinearLayer(np.zeros((num_classes, math.prod(top))), np.zeros(num_classes), "none")
    forward.append(init_weights(head, init_scheme, rng, dtype))

    feedback: List[Layer] = []
    for l in range(1, len(channels) + 1):
        (c_big, h_big, w_big), (c_small, _, _) = shapes[l - 1], shapes[l]
        act = "none" if l == 1 else activation
        block = FeedbackConvBlock(np.zeros((c_big, c_small, 3, 3)), np.zeros(c_big), (h_big, w_big), 2, act)
        feedback.append(init_weights(block, init_scheme, rng, dtype))
    entry = LinearLayer(np.zeros((math.prod(top), num_classes)), np.zeros(math.prod(top)), activation, out_shape=top)
    feedback.append(init_weights(entry, init_scheme, rng, dtype))

    logger.debug(f"built cnn with feature shapes {shapes}")
    return DualNetwork(forward, feedback, shapes + [(num_classes,)], kind="cnn")


def _check_batch(net: DualNetwork, x: Tensor, y: Optional[Tensor]) -> None:
    if x.shape[1:] != net.input_shape and x.reshape(x.shape[0], -1).shape[1:] != (net.layer_dims[0],):
        raise DimensionError(f"input {x.shape} does not fit network input {net.input_shape}")
    if y is not None:
        if y.ndim != 2 or y.shape[1] != net.num_classes:
            raise DimensionError(f"targets {y.shape} do not fit {net.num_classes} classes")
        if y.shape[0] != x.shape[0]:
            raise DimensionError(f"batch sizes differ: inputs {x.shape[0]}, targets {y.shape[0]}")


def _as_input(net: DualNetwork, x: Tensor) -> Tensor:
    return x.reshape((x.shape[0],) + net.input_shape)


def forward_pass(net: DualNetwork, x: Tensor) -> Tuple[List[Tensor], List[Tensor]]:
    """Forward stack only: ([a_0 .. a_L], [z_1 .. z_L])"""
    _check_batch(net, x, None)
    acts, pres = [_as_input(net, x)], []
    for layer in net.forward_layers:
        z, a = layer.forward(acts[-1])
        pres.append(z)
        acts.append(a)
    return acts, pres


def feedback_pass(net: DualNetwork, y: Tensor) -> Tuple[List[Tensor], List[Tensor]]:
    """Feedback stack only: ([b_0 .. b_L], [pre-activations of b_0 .. b_{L-1}])"""
    depth = net.num_layers
    acts: List[Optional[Tensor]] = [None] * (depth + 1)
    pres: List[Optional[Tensor]] = [None] * depth
    acts[depth] = y
    for l in range(depth, 0, -1):
        z, a = net.feedback_layers[l - 1].forward(acts[l])
        pres[l - 1] = z
        acts[l - 1] = a
    return acts, pres


def compact_targets(y: Tensor, dedup: bool = True) -> Tuple[Tensor, np.ndarray]:
    """Distinct target rows (sorted) and the index mapping every sample onto them"""
    if not dedup:
        return y, np.arange(y.shape[0])
    unique, index = np.unique(y, axis=0, return_inverse=True)
    return unique, index.reshape(-1)


def run_dual(net: DualNetwork, x: Tensor, y: Tensor, parallel: bool = False,
             dedup: bool = True) -> ActivationTrace:
    """Run both stacks on one batch; neither pass reads the other's data"""
    _check_batch(net, x, y)
    compact_y, index = compact_targets(y, dedup)
    if parallel:
        with ThreadPoolExecutor(max_workers=2) as pool:
            fw = pool.submit(forward_pass, net, x)
            bw = pool.submit(feedback_pass, net, compact_y)
            (f_acts, f_pres), (b_acts, b_pres) = fw.result(), bw.result()
    else:
        f_acts, f_pres = forward_pass(net, x)
        b_acts, b_pres = feedback_pass(net, compact_y)
    return ActivationTrace(f_acts, f_pres, b_acts, b_pres, index)
