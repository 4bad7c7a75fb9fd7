"""Layer-local objectives of counter-current learning.

Activations are flattened to ``B x D`` and row-normalized before they are
compared. The alignment loss pushes the ``B x B`` cross-similarity of the two
networks' activations toward the identity; the anti-collapse term does the
same for one network's activations against themselves, off the diagonal.
Both use the mean squared Frobenius error (``1 / B^2`` scaling).

Feedback activations may be passed compact (one row per distinct target) with
an index or per-row counts; the results equal the per-sample computation, and
gradients come back summed per compact row.
"""

import logging
from dataclasses import dataclass
from typing import List, Optional, Tuple

import numpy as np
from scipy import special

from domain.entities import LocalLossReport
from domain.exceptions import DimensionError, LabelError
from domain.network import ActivationTrace
from domain.tensor import Tensor, check_finite, softmax_rowwise

logger = logging.getLogger(__name__)

NORM_EPS = 1e-8
FLOODING_METRICS = ("mse", "sse")


def _flatten(x: Tensor) -> Tensor:
    return x.reshape(x.shape[0], -1)


def _normalize(x: Tensor) -> Tuple[Tensor, Tensor]:
    norms = np.linalg.norm(x, axis=1)
    alive = norms >= NORM_EPS
    safe = np.where(alive, norms, 1.0)
    x_hat = np.where(alive[:, None], x / safe[:, None], 0.0)
    return x_hat.astype(x.dtype, copy=False), norms


def _normalize_backward(grad_hat: Tensor, x_hat: Tensor, norms: Tensor) -> Tensor:
    """Apply the Jacobian (I - x_hat x_hat^T) / |x| of row normalization; zero rows get no gradient"""
    alive = norms >= NORM_EPS
    safe = np.where(alive, norms, 1.0)
    radial = np.sum(x_hat * grad_hat, axis=1, keepdims=True)
    grad = (grad_hat - x_hat * radial) / safe[:, None]
    return np.where(alive[:, None], grad, 0.0).astype(grad_hat.dtype, copy=False)


def row_normalize(x: Tensor) -> Tensor:
    """Unit-L2 rows of the flattened ``B x D`` view; rows with norm < 1e-8 become zero"""
    return _normalize(_flatten(x))[0]


def alignment_loss(a: Tensor, b: Tensor, b_index: Optional[np.ndarray] = None) -> Tuple[float, Tensor, Tensor]:
    """Mean squared error between norm(a) norm(b)^T and the identity.

    With ``b_index`` the rows of ``b`` are compact and sample i is paired with
    ``b[b_index[i]]``; the returned ``b`` gradient then has ``b``'s compact shape.
    """
    a2, b2 = _flatten(a), _flatten(b)
    batch = a2.shape[0]
    if b_index is None:
        if b2.shape[0] != batch:
            raise DimensionError(f"alignment: batch sizes differ, {a.shape} vs {b.shape}")
        b_index = np.arange(batch)
    elif b_index.shape != (batch,) or (batch and b_index.max() >= b2.shape[0]):
        raise DimensionError(f"alignment: index of shape {b_index.shape} does not fit {b.shape}")
    if a2.shape[1] != b2.shape[1]:
        raise DimensionError(f"alignment: feature dimensions differ, {a.shape} vs {b.shape}")

    a_hat, a_norm = _normalize(a2)
    b_hat, b_norm = _normalize(b2)
    pairing = np.zeros((batch, b2.shape[0]), dtype=a2.dtype)
    pairing[np.arange(batch), b_index] = 1.0

    similarity = (a_hat @ b_hat.T)[:, b_index]
    resid = similarity - np.eye(batch, dtype=a2.dtype)
    loss = float(np.sum(resid ** 2)) / batch ** 2
    grad_sim = (2.0 / batch ** 2) * resid @ pairing  # columns summed per compact row

    grad_a = _normalize_backward(grad_sim @ b_hat, a_hat, a_norm).reshape(a.shape)
    grad_b = _normalize_backward(grad_sim.T @ a_hat, b_hat, b_norm).reshape(b.shape)
    return loss, check_finite(grad_a, "alignment grad a"), check_finite(grad_b, "alignment grad b")


def anticollapse_loss(x: Tensor, counts: Optional[np.ndarray] = None) -> Tuple[float, Tensor]:
    """Mean squared off-diagonal entry of norm(x) norm(x)^T.

    ``counts[i]`` is how many samples row i stands for; the loss is the one
    the expanded batch would give.
    """
    x2 = _flatten(x)
    counts = np.ones(x2.shape[0]) if counts is None else np.asarray(counts, dtype=np.float64)
    if counts.shape != (x2.shape[0],):
        raise DimensionError(f"anticollapse: counts {counts.shape} do not match {x.shape}")
    batch = counts.sum()
    if batch == 0:
        return 0.0, np.zeros_like(x)
    x_hat, norms = _normalize(x2)
    gram = x_hat @ x_hat.T
    weights = (np.outer(counts, counts) - np.diag(counts)).astype(x2.dtype)
    loss = float(np.sum(weights * gram ** 2)) / batch ** 2
    grad_gram = (2.0 / batch ** 2) * weights * gram
    grad = _normalize_backward(2.0 * grad_gram @ x_hat, x_hat, norms).reshape(x.shape)
    return loss, check_finite(grad, "anticollapse grad")


def _check_one_hot(y: Tensor) -> None:
    if not (np.all((y == 0) | (y == 1)) and np.all(y.sum(axis=1) == 1)):
        raise LabelError("targets must be one-hot rows")


def cross_entropy(logits: Tensor, y_onehot: Tensor,
                  sample_mask: Optional[np.ndarray] = None) -> Tuple[float, Tensor]:
    """Batch-mean cross-entropy; samples with ``sample_mask`` False add neither loss nor gradient"""
    if logits.shape != y_onehot.shape or logits.ndim != 2:
        raise DimensionError(f"cross_entropy: logits {logits.shape} vs targets {y_onehot.shape}")
    _check_one_hot(y_onehot)
    batch = logits.shape[0]
    keep = np.ones(batch, dtype=bool) if sample_mask is None else sample_mask
    per_sample = -np.sum(y_onehot * special.log_softmax(logits, axis=1), axis=1)
    loss = float(np.sum(per_sample[keep])) / batch
    grad = (softmax_rowwise(logits) - y_onehot) * keep[:, None] / batch
    return loss, check_finite(grad.astype(logits.dtype, copy=False), "cross_entropy grad")


def flooding_mask(outputs: Tensor, y_onehot: Tensor, threshold: float = 0.2,
                  metric: str = "mse") -> np.ndarray:
    """True for samples whose prediction already matches the target within ``threshold``.

    ``mse`` averages (softmax(o) - y)^2 over classes, ``sse`` sums it.
    """
    if metric not in FLOODING_METRICS:
        raise ValueError(f"unknown flooding metric '{metric}'")
    sq = (softmax_rowwise(outputs) - y_onehot) ** 2
    diff = sq.mean(axis=1) if metric == "mse" else sq.sum(axis=1)
    return diff < threshold


@dataclass
class ActivationGrads:
    """Loss gradients on the trace activations, routed to their producing layers.

    ``forward[l]`` is dL/da_l (l = 1..L, slot 0 unused) and feeds U_l;
    ``feedback[l]`` is dL/db_l on the compact rows (l = 0..L-1, slot L unused)
    and feeds V_{l+1}.
    """

    forward: List[Optional[Tensor]]
    feedback: List[Optional[Tensor]]


def ccl_local_objective(trace: ActivationTrace, regularizer_lambda: float = 1.0,
                        flooding_threshold: Optional[float] = None,
                        flooding_metric: str = "sse") -> Tuple[LocalLossReport, ActivationGrads]:
    depth = trace.num_layers
    acts = trace.forward_acts
    compact = trace.feedback_compact
    y = trace.feedback_acts[depth]
    index = trace.label_index
    num_compact = compact[0].shape[0]

    masked = None
    keep = np.ones(trace.batch_size, dtype=bool)
    if flooding_threshold is not None:
        masked = flooding_mask(acts[depth], y, flooding_threshold, flooding_metric)
        keep = ~masked
    kept_index = index[keep]
    counts = np.bincount(kept_index, minlength=num_compact)

    grads = ActivationGrads([None] * (depth + 1), [None] * (depth + 1))
    align, reg_fw, reg_bw = [], [], []
    for l in range(depth):
        a_full = acts[l]
        grad_a = np.zeros_like(a_full)
        grad_b = np.zeros_like(compact[l])
        if keep.any():
            loss, ga, gb = alignment_loss(a_full[keep], compact[l], kept_index)
            grad_a[keep] += ga
            grad_b += gb
        else:
            loss = 0.0
        align.append(loss)
        if l > 0 and regularizer_lambda:
            fw_loss, fw_grad = anticollapse_loss(a_full[keep]) if keep.any() else (0.0, None)
            bw_loss, bw_grad = anticollapse_loss(compact[l], counts)
            if fw_grad is not None:
                grad_a[keep] += regularizer_lambda * fw_grad
            grad_b += regularizer_lambda * bw_grad
            reg_fw.append(fw_loss)
            reg_bw.append(bw_loss)
        elif l > 0:
            reg_fw.append(0.0)
            reg_bw.append(0.0)
        if l > 0:
            grads.forward[l] = grad_a
        grads.feedback[l] = grad_b

    ce, grad_logits = cross_entropy(acts[depth], y, keep)
    grads.forward[depth] = grad_logits
    report = LocalLossReport(
        alignment_losses=align,
        regularizer_losses={"forward": reg_fw, "feedback": reg_bw},
        output_ce=ce,
        flooding_mask=masked,
    )
    return report, grads


def ccl_total_losses(trace: ActivationTrace, config) -> LocalLossReport:
    """Losses of one CCL step under a TrainConfig (flooding only in CNN mode)"""
    report, _ = ccl_local_objective(
        trace,
        regularizer_lambda=config.regularizer_lambda,
        flooding_threshold=config.flooding_threshold if config.flooding_active else None,
        flooding_metric=config.flooding_metric,
    )
    return report
