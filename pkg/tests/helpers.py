"""Shared test utilities: finite differences, naive kernel oracles and tiny dataset files"""

import struct
from pathlib import Path
from typing import Callable, Iterable

import numpy as np

FD_STEP = 1e-5


def numerical_grad(fn: Callable[[], float], param: np.ndarray, h: float = FD_STEP) -> np.ndarray:
    """Central differences of ``fn`` with respect to ``param``, perturbed in place"""
    grad = np.zeros_like(param, dtype=np.float64)
    it = np.nditer(param, flags=["multi_index"], op_flags=["readwrite"])
    while not it.finished:
        idx = it.multi_index
        orig = param[idx]
        param[idx] = orig + h
        plus = fn()
        param[idx] = orig - h
        minus = fn()
        param[idx] = orig
        grad[idx] = (plus - minus) / (2 * h)
        it.iternext()
    return grad


def rel_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    denom = max(np.max(np.abs(analytic)), np.max(np.abs(numeric)), 1e-8)
    return float(np.max(np.abs(analytic - numeric)) / denom)


def naive_matmul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    out = np.zeros((a.shape[0], b.shape[1]))
    for i in range(a.shape[0]):
        for j in range(b.shape[1]):
            for k in range(a.shape[1]):
                out[i, j] += a[i, k] * b[k, j]
    return out


def naive_conv2d(x: np.ndarray, kernel: np.ndarray, stride: int = 1, padding: int = 0) -> np.ndarray:
    b, c, h, w = x.shape
    f = kernel.shape[0]
    xp = np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    ho = (h + 2 * padding - 3) // stride + 1
    wo = (w + 2 * padding - 3) // stride + 1
    out = np.zeros((b, f, ho, wo))
    for n in range(b):
        for o in range(f):
            for i in range(ho):
                for j in range(wo):
                    for ch in range(c):
                        for ki in range(3):
                            for kj in range(3):
                                out[n, o, i, j] += xp[n, ch, i * stride + ki, j * stride + kj] * kernel[o, ch, ki, kj]
    return out


def naive_maxpool(x: np.ndarray) -> np.ndarray:
    b, c, h, w = x.shape
    out = np.zeros((b, c, h // 2, w // 2))
    for i in range(h // 2):
        for j in range(w // 2):
            out[:, :, i, j] = x[:, :, 2 * i:2 * i + 2, 2 * j:2 * j + 2].max(axis=(2, 3))
    return out


def write_idx_images(path: Path, images: np.ndarray) -> Path:
    n, rows, cols = images.shape
    path.write_bytes(struct.pack(">IIII", 0x00000803, n, rows, cols) + images.astype(np.uint8).tobytes())
    return path


def write_idx_labels(path: Path, labels: Iterable[int]) -> Path:
    labels = np.asarray(list(labels), dtype=np.uint8)
    path.write_bytes(struct.pack(">II", 0x00000801, labels.shape[0]) + labels.tobytes())
    return path


def write_cifar_records(path: Path, images: np.ndarray, labels, coarse=None) -> Path:
    """images: N x 3 x 32 x 32 uint8; CIFAR-100 records when ``coarse`` is given"""
    chunks = []
    for i, img in enumerate(images.astype(np.uint8)):
        head = bytes([int(coarse[i]), int(labels[i])]) if coarse is not None else bytes([int(labels[i])])
        chunks.append(head + img.tobytes())
    path.write_bytes(b"".join(chunks))
    return path


def synthetic_digits(n: int, seed: int = 0, classes: int = 10, size: int = 8) -> tuple:
    """Separable class-dependent uint8 images: each class lights a different pixel block"""
    rng = np.random.default_rng(seed)
    labels = np.arange(n) % classes
    rng.shuffle(labels)
    images = rng.integers(0, 40, size=(n, size, size))
    for i, label in enumerate(labels):
        r, c = divmod(int(label), 4)
        images[i, 2 * r:2 * r + 2, 2 * c:2 * c + 2] = 255
    return images.astype(np.uint8), labels


def write_idx_dataset(root: Path, name: str = "mnist", n_train: int = 200, n_test: int = 60,
                      size: int = 8) -> Path:
    """Tiny IDX dataset laid out as the loaders expect"""
    base = root / name
    base.mkdir(parents=True, exist_ok=True)
    for split, n, seed in (("train", n_train, 0), ("t10k", n_test, 1)):
        images, labels = synthetic_digits(n, seed, size=size)
        write_idx_images(base / f"{split}-images-idx3-ubyte", images)
        write_idx_labels(base / f"{split}-labels-idx1-ubyte", labels)
    return root
