"""Measurement tools: CKA between activation sets, forward/feedback weight alignment,
analytic FLOPs counting and embedding export"""

import json
import logging
import math
from pathlib import Path
from typing import List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd

from adapters.data_adapter import one_hot, subset
from domain.entities import CkaMatrix, Dataset, FlopsReport
from domain.exceptions import DimensionError
from domain.layers import ConvBlock, FeedbackConvBlock, Layer, LinearLayer, weight_of
from domain.network import ActivationTrace, DualNetwork, run_dual
from domain.tensor import Tensor

logger = logging.getLogger(__name__)

# Published per-sample training FLOPs (millions), MLP on MNIST and CNN on CIFAR-10
PUBLISHED_FLOPS_M = {
    "mnist": {"BP": 2.39, "DTP": 48.69, "DRL": 125.73, "L-DRL": 82.45, "FWDTP-BN": 18.06, "CCL": 2.55},
    "cifar10": {"BP": 25.23, "DTP": 485.59, "DRL": 833.81, "L-DRL": 770.36, "FWDTP-BN": 170.08, "CCL": 27.89},
}

# Per-element costs used by the counter
ACT_FLOPS = 1
ACT_DERIV_FLOPS = 2
POOL_FLOPS = 3
UPDATE_FLOPS = 9


# ---------------------------------------------------------------------------
# CKA
# ---------------------------------------------------------------------------

def linear_cka(x: Tensor, y: Tensor) -> float:
    """Linear CKA of two activation sets sharing the sample axis; 0 when either side is constant"""
    x = np.asarray(x, dtype=np.float64).reshape(x.shape[0], -1)
    y = np.asarray(y, dtype=np.float64).reshape(y.shape[0], -1)
    if x.shape[0] != y.shape[0]:
        raise DimensionError(f"linear_cka: sample counts differ, {x.shape[0]} vs {y.shape[0]}")
    if x.shape[0] < 2:
        raise DimensionError("linear_cka: need at least 2 samples")
    xc = x - x.mean(axis=0)
    yc = y - y.mean(axis=0)
    cross = np.linalg.norm(yc.T @ xc) ** 2
    denom = np.linalg.norm(xc.T @ xc) * np.linalg.norm(yc.T @ yc)
    if denom == 0:
        return 0.0
    return float(np.clip(cross / denom, 0.0, 1.0))


def cka_matrix(rows: Sequence[Tensor], cols: Sequence[Tensor], step: int = 0,
               row_labels: Optional[List[str]] = None,
               col_labels: Optional[List[str]] = None) -> CkaMatrix:
    values = np.array([[linear_cka(r, c) for c in cols] for r in rows])
    return CkaMatrix(
        values,
        step,
        row_labels or [f"r{i}" for i in range(len(rows))],
        col_labels or [f"c{j}" for j in range(len(cols))],
    )


def collect_trace(net: DualNetwork, ds: Dataset, num_samples: Optional[int] = 1000,
                  dtype=np.float64) -> ActivationTrace:
    """Both stacks on the first ``num_samples`` samples of ``ds`` (all when None)"""
    part = subset(ds, num_samples)
    x = part.images.astype(dtype, copy=False)
    y = one_hot(part.labels, ds.num_classes, dtype)
    return run_dual(net, x, y)


def cka_grid(trace: ActivationTrace, step: int = 0) -> CkaMatrix:
    """Forward activations a_0..a_L (rows) against feedback activations b_L..b_0 (columns)"""
    depth = trace.num_layers
    feedback = trace.feedback_acts
    return cka_matrix(
        trace.forward_acts,
        [feedback[l] for l in range(depth, -1, -1)],
        step,
        [f"a{l}" for l in range(depth + 1)],
        [f"b{l}" for l in range(depth, -1, -1)],
    )


def write_cka_json(matrix: CkaMatrix, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(matrix.to_dict(), indent=2))
    logger.info(f"CKA grid written to {path}")
    return path


# ---------------------------------------------------------------------------
# Weight alignment
# ---------------------------------------------------------------------------

def _mirrored_weight(layer: Layer) -> Tensor:
    weight = weight_of(layer)
    if isinstance(layer, FeedbackConvBlock):
        return weight.transpose(1, 0, 2, 3)
    return weight.T


def weight_alignment(net: DualNetwork) -> List[Optional[float]]:
    """Cosine between vec(U_l) and vec(V_l^T) per layer; None where the shapes do not mirror"""
    cosines: List[Optional[float]] = []
    for l, (fw, bw) in enumerate(zip(net.forward_layers, net.feedback_layers), start=1):
        u = weight_of(fw)
        v = _mirrored_weight(bw)
        if u.shape != v.shape:
            logger.warning(f"layer {l}: forward {u.shape} and mirrored feedback {v.shape} differ, skipped")
            cosines.append(None)
            continue
        denom = np.linalg.norm(u) * np.linalg.norm(v)
        cosines.append(float(np.sum(u * v) / denom) if denom > 0 else 0.0)
    return cosines


# ---------------------------------------------------------------------------
# FLOPs
# ---------------------------------------------------------------------------

def layer_forward_flops(layer: Layer, in_shape: Tuple[int, ...]) -> Tuple[float, Tuple[int, ...]]:
    """Per-sample forward cost of one layer and the shape it produces"""
    if isinstance(layer, LinearLayer):
        out = layer.out_features
        flops = 2 * layer.in_features * out + out
        if layer.activation != "none":
            flops += ACT_FLOPS * out
        return float(flops), layer.output_shape
    if isinstance(layer, ConvBlock):
        c_out, c_in = layer.kernel.shape[:2]
        _, h, w = in_shape
        conv_elems = c_out * h * w
        flops = 2 * c_in * 9 * conv_elems + conv_elems
        if layer.activation != "none":
            flops += ACT_FLOPS * conv_elems
        if layer.pool == "maxpool2x2":
            h, w = h // 2, w // 2
            flops += POOL_FLOPS * c_out * h * w
        return float(flops), (c_out, h, w)
    if isinstance(layer, FeedbackConvBlock):
        c_out, c_in = layer.kernel.shape[:2]
        _, h_in, w_in = in_shape
        h, w = layer.output_hw
        flops = 2 * c_in * 9 * c_out * h_in * w_in + c_out * h * w
        if layer.activation != "none":
            flops += ACT_FLOPS * c_out * h * w
        return float(flops), (c_out, h, w)
    raise TypeError(f"unknown layer type {type(layer).__name__}")


def count_forward_flops(layers: Sequence[Layer], in_shape: Tuple[int, ...]) -> FlopsReport:
    flops = 0.0
    shape = tuple(in_shape)
    for layer in layers:
        cost, shape = layer_forward_flops(layer, shape)
        flops += cost
    return FlopsReport(forward=flops)


def _matmul_flops(layer: Layer, in_shape: Tuple[int, ...]) -> float:
    """Multiply-adds of the layer's weight product, which its weight gradient repeats"""
    if isinstance(layer, LinearLayer):
        return 2.0 * layer.in_features * layer.out_features
    # conv: 9 taps per channel pair at every input position
    c_out, c_in = layer.kernel.shape[:2]
    _, h, w = in_shape
    return 2.0 * c_in * 9 * c_out * h * w


def _pre_activation_size(layer: Layer, in_shape: Tuple[int, ...]) -> int:
    if isinstance(layer, ConvBlock):
        _, h, w = in_shape
        return layer.kernel.shape[0] * h * w
    _, out_shape = layer_forward_flops(layer, in_shape)
    return math.prod(out_shape)


def _weight_grad_flops(layer: Layer, in_shape: Tuple[int, ...]) -> float:
    return _matmul_flops(layer, in_shape) + ACT_DERIV_FLOPS * _pre_activation_size(layer, in_shape)


def _param_count(layers: Sequence[Layer]) -> int:
    return sum(p.size for layer in layers for p in layer.parameters().values())


def count_flops(net: DualNetwork, trainer_kind: str, batch_size: int) -> FlopsReport:
    """Analytic per-sample FLOPs of one training step.

    A matrix product costs 2mkn; weight gradients repeat the forward product
    and input gradients (BP, FA) add one more per layer above the first.
    CCL's feedback stack runs once per distinct label in the batch, so its
    share is scaled by min(num_classes, batch_size) / batch_size. Updates cost
    ``UPDATE_FLOPS`` per parameter per step, spread over the batch.
    """
    kind = str(getattr(trainer_kind, "value", trainer_kind)).lower()
    if batch_size < 1:
        raise ValueError(f"batch_size must be positive, got {batch_size}")
    shapes = net.layer_shapes
    depth = net.num_layers
    classes = net.num_classes
    fw = net.forward_layers

    forward = count_forward_flops(fw, shapes[0]).forward
    loss = 4.0 * classes
    gradient = sum(_weight_grad_flops(fw[l], shapes[l]) for l in range(depth))
    params = _param_count(fw)

    if kind in ("bp", "fa"):
        gradient += sum(_matmul_flops(fw[l], shapes[l]) for l in range(1, depth))
        return FlopsReport(forward, 0.0, loss, gradient, UPDATE_FLOPS * params / batch_size)
    if kind == "drtp":
        gradient += sum(2.0 * classes * net.layer_dims[l] for l in range(1, depth))
        return FlopsReport(forward, 0.0, loss, gradient, UPDATE_FLOPS * params / batch_size)
    if kind != "ccl":
        raise ValueError(f"unknown trainer kind '{trainer_kind}'")

    distinct = min(classes, batch_size)
    share = distinct / batch_size
    bw = net.feedback_layers
    feedback = share * sum(layer_forward_flops(bw[l - 1], shapes[l])[0] for l in range(1, depth + 1))
    gradient += share * sum(_weight_grad_flops(bw[l - 1], shapes[l]) for l in range(1, depth + 1))

    # alignment: two row normalizations, the B x K similarity and its two gradient products
    for l in range(depth):
        d = net.layer_dims[l]
        loss += 6.0 * distinct * d + 10.0 * d
    # anti-collapse on hidden layers: B x B gram of forward rows, K x K of feedback rows
    for l in range(1, depth):
        d = net.layer_dims[l]
        loss += 4.0 * batch_size * d + 4.0 * distinct * distinct * d / batch_size
    params += _param_count(bw)
    return FlopsReport(forward, feedback, loss, gradient, UPDATE_FLOPS * params / batch_size)


# ---------------------------------------------------------------------------
# Embeddings
# ---------------------------------------------------------------------------

def export_embeddings(trace: ActivationTrace, layer_indices: Sequence[int], path) -> Path:
    """CSV with one row per (sample, network, layer): sample_id, label, network, layer, d0..

    Layers of different widths share the file; missing trailing dims are empty.
    """
    depth = trace.num_layers
    bad = [l for l in layer_indices if not 0 <= l <= depth]
    if bad:
        raise DimensionError(f"layer indices {bad} outside 0..{depth}")
    labels = trace.feedback_acts[depth].argmax(axis=1)
    n = trace.batch_size
    frames = []
    for l in layer_indices:
        for network, acts in (("fw", trace.forward_acts[l]), ("bw", trace.feedback_acts[l])):
            flat = acts.reshape(n, -1)
            frame = pd.DataFrame(flat, columns=[f"d{j}" for j in range(flat.shape[1])])
            frame.insert(0, "layer", l)
            frame.insert(0, "network", network)
            frame.insert(0, "label", labels)
            frame.insert(0, "sample_id", np.arange(n))
            frames.append(frame)
    table = pd.concat(frames, ignore_index=True)
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    table.to_csv(path, index=False)
    logger.info(f"exported {len(table)} embedding rows to {path}")
    return path
