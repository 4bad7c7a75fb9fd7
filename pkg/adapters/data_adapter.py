"""Shape raw datasets into what the trainers consume: normalized, split, batched, one-hot"""

import logging
from dataclasses import replace
from typing import Iterator, Optional, Tuple

import numpy as np

from domain.entities import Dataset, NormStats
from domain.exceptions import LabelError
from domain.tensor import Rng, RngStream

logger = logging.getLogger(__name__)


def compute_norm_stats(ds: Dataset) -> NormStats:
    """Per-channel mean and std over every pixel of every sample"""
    images = ds.images.astype(np.float64, copy=False)
    mean = images.mean(axis=(0, 2, 3))
    std = images.std(axis=(0, 2, 3))
    return NormStats(mean, np.where(std > 0, std, 1.0))


def normalize(ds: Dataset, stats: NormStats) -> Dataset:
    mean = stats.mean.reshape(1, -1, 1, 1)
    std = stats.std.reshape(1, -1, 1, 1)
    images = ((ds.images - mean) / std).astype(ds.images.dtype, copy=False)
    return replace(ds, images=images)


def augment(batch: np.ndarray, rng: Rng, pad: int = 4, flip_prob: float = 0.5,
            offsets: Optional[np.ndarray] = None, flips: Optional[np.ndarray] = None) -> np.ndarray:
    """Zero-pad by ``pad``, crop back to the original size at a random offset, then flip.

    ``offsets`` (B x 2, each in [0, 2*pad]) and ``flips`` (B booleans) can be
    given to fix the draw; otherwise they come from ``rng``.
    """
    b, _, h, w = batch.shape
    if offsets is None:
        offsets = rng.integers(0, 2 * pad + 1, size=(b, 2))
    if flips is None:
        flips = rng.random(b) < flip_prob
    padded = np.pad(batch, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    out = np.empty_like(batch)
    for i in range(b):
        dy, dx = int(offsets[i, 0]), int(offsets[i, 1])
        crop = padded[i, :, dy:dy + h, dx:dx + w]
        out[i] = crop[:, :, ::-1] if flips[i] else crop
    return out


def split_train_val(ds: Dataset, val_fraction: float, seed: int) -> Tuple[Dataset, Dataset]:
    if not 0 < val_fraction < 1:
        raise ValueError(f"val_fraction must be in (0, 1), got {val_fraction}")
    n = len(ds)
    n_val = int(round(n * val_fraction))
    order = Rng(seed, RngStream.SPLIT).permutation(n)
    val_idx, train_idx = np.sort(order[:n_val]), np.sort(order[n_val:])
    train = replace(ds, images=ds.images[train_idx], labels=ds.labels[train_idx], split_tag="train")
    val = replace(ds, images=ds.images[val_idx], labels=ds.labels[val_idx], split_tag="val")
    logger.info(f"split {ds.name or 'dataset'}: {len(train)} train / {len(val)} val")
    return train, val


def subset(ds: Dataset, n: Optional[int]) -> Dataset:
    """First ``n`` samples in file order (the whole set when n is None or larger)"""
    if n is None or n >= len(ds):
        return ds
    return replace(ds, images=ds.images[:n], labels=ds.labels[:n])


def one_hot(labels: np.ndarray, num_classes: int, dtype=np.float64) -> np.ndarray:
    labels = np.asarray(labels)
    if labels.size and (labels.min() < 0 or labels.max() >= num_classes):
        raise LabelError(f"labels outside [0, {num_classes})")
    out = np.zeros((labels.shape[0], num_classes), dtype=dtype)
    out[np.arange(labels.shape[0]), labels] = 1
    return out


def flatten_images(images: np.ndarray) -> np.ndarray:
    return images.reshape(images.shape[0], -1)


def iterate_batches(ds: Dataset, batch_size: int, rng: Optional[Rng] = None,
                    drop_last: bool = False) -> Iterator[Tuple[np.ndarray, np.ndarray]]:
    """(images, labels) batches; shuffled by ``rng`` when given, file order otherwise"""
    n = len(ds)
    order = rng.permutation(n) if rng is not None else np.arange(n)
    for start in range(0, n, batch_size):
        idx = order[start:start + batch_size]
        if drop_last and idx.shape[0] < batch_size:
            break
        yield ds.images[idx], ds.labels[idx]
