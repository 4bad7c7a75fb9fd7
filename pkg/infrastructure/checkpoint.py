"""Binary checkpoint of a dual network.

Layout, all integers little-endian:

    b"CCL1"
    u8   network kind (0 mlp, 1 cnn)
    u8   dtype (0 float32, 1 float64)
    u32  L, then L + 1 x u32 flattened layer widths d_0..d_L
    u32  metadata length, then UTF-8 JSON (layer descriptions, shapes, extras)
    u32  tensor count, then per tensor:
         u16 name length, name, u8 rank, rank x u32 extents,
         raw row-major values in the declared dtype
"""

import json
import logging
import struct
from pathlib import Path
from typing import Dict, List, Optional, Tuple

import numpy as np

from domain.exceptions import ArchitectureMismatchError, CheckpointError
from domain.layers import ConvBlock, FeedbackConvBlock, Layer, LinearLayer, weight_of
from domain.network import DualNetwork

logger = logging.getLogger(__name__)

MAGIC = b"CCL1"
KINDS = ("mlp", "cnn")
DTYPES = (np.dtype("<f4"), np.dtype("<f8"))


def _describe(layer: Layer) -> dict:
    if isinstance(layer, LinearLayer):
        return {"type": "linear", "activation": layer.activation,
                "out_shape": list(layer.out_shape) if layer.out_shape else None}
    if isinstance(layer, ConvBlock):
        return {"type": "conv", "activation": layer.activation, "pool": layer.pool,
                "stride": layer.stride, "padding": layer.padding}
    return {"type": "feedback_conv", "activation": layer.activation, "output_hw": list(layer.output_hw),
            "upsample_factor": layer.upsample_factor, "padding": layer.padding}


def _rebuild(desc: dict, params: Dict[str, np.ndarray]) -> Layer:
    kind = desc["type"]
    if kind == "linear":
        out_shape = tuple(desc["out_shape"]) if desc.get("out_shape") else None
        return LinearLayer(params["weight"], params["bias"], desc["activation"], out_shape)
    if kind == "conv":
        return ConvBlock(params["kernel"], params["bias"], desc["pool"], desc["activation"],
                         desc["stride"], desc["padding"])
    if kind == "feedback_conv":
        return FeedbackConvBlock(params["kernel"], params["bias"], tuple(desc["output_hw"]),
                                 desc["upsample_factor"], desc["activation"], desc["padding"])
    raise CheckpointError(f"unknown layer type '{kind}'")


def save_checkpoint(net: DualNetwork, path, extra: Optional[dict] = None) -> Path:
    """Write ``net`` (and JSON-safe ``extra`` metadata); identical inputs give identical bytes"""
    dtype = DTYPES[0] if weight_of(net.forward_layers[0]).dtype == np.float32 else DTYPES[1]
    meta = {
        "kind": net.kind,
        "layer_shapes": [list(s) for s in net.layer_shapes],
        "forward": [_describe(layer) for layer in net.forward_layers],
        "feedback": [_describe(layer) for layer in net.feedback_layers],
        "extra": extra or {},
    }
    meta_bytes = json.dumps(meta, sort_keys=True).encode("utf-8")
    tensors = [(f"fw.{k}", v) for k, v in net.named_parameters("forward").items()]
    tensors += [(f"bw.{k}", v) for k, v in net.named_parameters("feedback").items()]

    parts = [MAGIC, struct.pack("<BB", KINDS.index(net.kind), DTYPES.index(dtype)),
             struct.pack(f"<I{net.num_layers + 1}I", net.num_layers, *net.layer_dims),
             struct.pack("<I", len(meta_bytes)), meta_bytes, struct.pack("<I", len(tensors))]
    for name, value in tensors:
        encoded = name.encode("utf-8")
        parts.append(struct.pack("<H", len(encoded)) + encoded)
        parts.append(struct.pack(f"<B{value.ndim}I", value.ndim, *value.shape))
        parts.append(np.ascontiguousarray(value, dtype=dtype).tobytes())

    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(b"".join(parts))
    logger.info(f"checkpoint written to {path}")
    return path


class _Reader:
    def __init__(self, raw: bytes, path):
        self.raw = raw
        self.pos = 0
        self.path = path

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.raw):
            raise CheckpointError(f"{self.path}: truncated at byte {self.pos}")
        chunk = self.raw[self.pos:self.pos + n]
        self.pos += n
        return chunk

    def unpack(self, fmt: str) -> Tuple:
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))


def load_checkpoint(path) -> Tuple[DualNetwork, dict]:
    """Rebuild the network written by ``save_checkpoint``; returns it with the ``extra`` metadata"""
    path = Path(path)
    if not path.exists():
        raise CheckpointError(f"checkpoint not found: {path}")
    reader = _Reader(path.read_bytes(), path)
    if reader.take(4) != MAGIC:
        raise CheckpointError(f"{path}: not a CCL1 checkpoint")
    kind_code, dtype_code = reader.unpack("<BB")
    if kind_code >= len(KINDS) or dtype_code >= len(DTYPES):
        raise CheckpointError(f"{path}: bad kind/dtype codes {kind_code}/{dtype_code}")
    dtype = DTYPES[dtype_code]
    (depth,) = reader.unpack("<I")
    dims = list(reader.unpack(f"<{depth + 1}I"))
    (meta_len,) = reader.unpack("<I")
    try:
        meta = json.loads(reader.take(meta_len).decode("utf-8"))
    except ValueError as e:
        raise CheckpointError(f"{path}: unreadable metadata ({e})") from e

    (count,) = reader.unpack("<I")
    tensors: Dict[str, np.ndarray] = {}
    for _ in range(count):
        (name_len,) = reader.unpack("<H")
        name = reader.take(name_len).decode("utf-8")
        (rank,) = reader.unpack("<B")
        shape = reader.unpack(f"<{rank}I")
        size = int(np.prod(shape)) * dtype.itemsize
        tensors[name] = np.frombuffer(reader.take(size), dtype=dtype).reshape(shape).astype(dtype.newbyteorder("="))
    if reader.pos != len(reader.raw):
        raise CheckpointError(f"{path}: {len(reader.raw) - reader.pos} trailing bytes")

    def stack(prefix: str, descs: List[dict]) -> List[Layer]:
        layers = []
        for i, desc in enumerate(descs, start=1):
            head = f"{prefix}.{i}."
            params = {k[len(head):]: v for k, v in tensors.items() if k.startswith(head)}
            layers.append(_rebuild(desc, params))
        return layers

    try:
        net = DualNetwork(stack("fw", meta["forward"]), stack("bw", meta["feedback"]),
                          [tuple(s) for s in meta["layer_shapes"]], KINDS[kind_code])
    except (KeyError, TypeError) as e:
        raise CheckpointError(f"{path}: incomplete checkpoint ({e})") from e
    if net.layer_dims != dims:
        raise CheckpointError(f"{path}: header widths {dims} disagree with stored layers {net.layer_dims}")
    return net, meta.get("extra", {})


def check_compatible(net: DualNetwork, input_shape: Tuple[int, ...], num_classes: int) -> None:
    """Raise ArchitectureMismatchError when ``net`` cannot consume the given data"""
    width = int(np.prod(input_shape))
    if net.layer_dims[0] != width or net.num_classes != num_classes:
        raise ArchitectureMismatchError(
            f"network {net.layer_dims[0]} -> {net.num_classes} does not fit data "
            f"{tuple(input_shape)} with {num_classes} classes")
