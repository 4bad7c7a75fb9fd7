"""Readers for the MNIST-family IDX files and the CIFAR binary batches"""

import gzip
import logging
import struct
from pathlib import Path
from typing import Dict, List, Sequence, Tuple, Union

import numpy as np

from domain.entities import Dataset
from domain.exceptions import DatasetFormatError, DatasetLengthError, DatasetMissingError

logger = logging.getLogger(__name__)

PathLike = Union[str, Path]

IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801
CIFAR_IMAGE_BYTES = 3 * 32 * 32
CIFAR_RECORD = {10: 1 + CIFAR_IMAGE_BYTES, 100: 2 + CIFAR_IMAGE_BYTES}

IDX_FILES = {
    "train": ("train-images-idx3-ubyte", "train-labels-idx1-ubyte"),
    "test": ("t10k-images-idx3-ubyte", "t10k-labels-idx1-ubyte"),
}
DATASET_LAYOUT: Dict[str, Dict] = {
    "mnist": {"dir": "mnist", "format": "idx", "classes": 10},
    "fashion_mnist": {"dir": "fashion_mnist", "format": "idx", "classes": 10},
    "cifar10": {
        "dir": "cifar-10-batches-bin", "format": "cifar", "classes": 10,
        "train": [f"data_batch_{i}.bin" for i in range(1, 6)], "test": ["test_batch.bin"],
    },
    "cifar100": {
        "dir": "cifar-100-binary", "format": "cifar", "classes": 100,
        "train": ["train.bin"], "test": ["test.bin"],
    },
}


def _read_bytes(path: PathLike) -> bytes:
    path = Path(path)
    if not path.exists():
        raise DatasetMissingError(f"dataset file not found: {path}")
    opener = gzip.open if path.suffix == ".gz" else open
    with opener(path, "rb") as f:
        return f.read()


def _parse_idx(raw: bytes, expected_magic: int, path: PathLike) -> np.ndarray:
    if len(raw) < 8:
        raise DatasetLengthError(f"{path}: {len(raw)} bytes is too short for an IDX header")
    (magic,) = struct.unpack(">I", raw[:4])
    if magic != expected_magic:
        raise DatasetFormatError(f"{path}: magic {magic:#010x}, expected {expected_magic:#010x}")
    ndim = magic & 0xFF
    header = 4 + 4 * ndim
    if len(raw) < header:
        raise DatasetLengthError(f"{path}: truncated IDX header")
    dims = struct.unpack(f">{ndim}I", raw[4:header])
    expected = int(np.prod(dims))
    if len(raw) - header != expected:
        raise DatasetLengthError(f"{path}: {len(raw) - header} data bytes, header promises {expected}")
    return np.frombuffer(raw, dtype=np.uint8, offset=header).reshape(dims)


def load_idx(images_path: PathLike, labels_path: PathLike, num_classes: int = 10,
             split_tag: str = "train", name: str = "") -> Dataset:
    """Big-endian IDX image/label pair; pixels scaled to [0, 1] and given a channel axis"""
    images = _parse_idx(_read_bytes(images_path), IDX_IMAGES_MAGIC, images_path)
    labels = _parse_idx(_read_bytes(labels_path), IDX_LABELS_MAGIC, labels_path)
    if images.shape[0] != labels.shape[0]:
        raise DatasetLengthError(f"{images.shape[0]} images but {labels.shape[0]} labels")
    pixels = images.astype(np.float64)[:, None, :, :] / 255.0
    logger.info(f"loaded {images.shape[0]} IDX samples from {images_path}")
    return Dataset(pixels, labels.astype(np.int64), num_classes, split_tag, name)


def load_cifar_binary(paths: Sequence[PathLike], num_classes: int, split_tag: str = "train",
                      name: str = "") -> Dataset:
    """CIFAR binary batches: label byte(s) then 3072 channel-major pixels per record.

    CIFAR-100 records carry a coarse and a fine label; the fine one is used.
    """
    if num_classes not in CIFAR_RECORD:
        raise ValueError(f"CIFAR has 10 or 100 classes, got {num_classes}")
    record = CIFAR_RECORD[num_classes]
    chunks: List[np.ndarray] = []
    for path in paths:
        raw = _read_bytes(path)
        if len(raw) == 0 or len(raw) % record:
            raise DatasetLengthError(f"{path}: {len(raw)} bytes is not a multiple of the {record}-byte record")
        chunks.append(np.frombuffer(raw, dtype=np.uint8).reshape(-1, record))
    records = np.concatenate(chunks) if chunks else np.zeros((0, record), dtype=np.uint8)
    labels = records[:, record - CIFAR_IMAGE_BYTES - 1].astype(np.int64)
    images = records[:, record - CIFAR_IMAGE_BYTES:].reshape(-1, 3, 32, 32).astype(np.float64) / 255.0
    logger.info(f"loaded {records.shape[0]} CIFAR-{num_classes} records from {len(paths)} file(s)")
    return Dataset(images, labels, num_classes, split_tag, name)


def _with_gz(path: Path) -> Path:
    gz = path.with_name(path.name + ".gz")
    return gz if not path.exists() and gz.exists() else path


def dataset_paths(name: str, split: str, data_root: PathLike) -> Tuple[str, List[Path]]:
    if name not in DATASET_LAYOUT:
        raise ValueError(f"unknown dataset '{name}'")
    if split not in ("train", "test"):
        raise ValueError(f"unknown split '{split}'")
    layout = DATASET_LAYOUT[name]
    base = Path(data_root) / layout["dir"]
    if layout["format"] == "idx":
        return "idx", [_with_gz(base / f) for f in IDX_FILES[split]]
    return "cifar", [base / f for f in layout[split]]


def load_dataset(name: str, split: str, data_root: PathLike) -> Dataset:
    """Resolve the standard file names of ``name`` under ``data_root`` and load one split"""
    fmt, paths = dataset_paths(name, split, data_root)
    missing = [str(p) for p in paths if not p.exists()]
    if missing:
        raise DatasetMissingError(f"{name}/{split}: missing {', '.join(missing)}")
    classes = DATASET_LAYOUT[name]["classes"]
    if fmt == "idx":
        return load_idx(paths[0], paths[1], classes, split, name)
    return load_cifar_binary(paths, classes, split, name)
