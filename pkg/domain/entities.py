# Domain entities: plain records passed between layers, no I/O dependencies

from dataclasses import asdict, dataclass, field
from typing import Dict, List, Optional

import numpy as np
from pydantic import BaseModel, ConfigDict

from domain.exceptions import DatasetLengthError, LabelError

METRICS_SCHEMA_VERSION = 1


@dataclass
class Dataset:
    """Images as reals in [0, 1] (or normalized), shape N x C x H x W, with integer labels"""

    images: np.ndarray
    labels: np.ndarray
    num_classes: int
    split_tag: str = "train"
    name: str = ""

    def __post_init__(self):
        if self.images.shape[0] != self.labels.shape[0]:
            raise DatasetLengthError(
                f"{self.images.shape[0]} images but {self.labels.shape[0]} labels"
            )
        if self.labels.size and (self.labels.min() < 0 or self.labels.max() >= self.num_classes):
            raise LabelError(f"labels outside [0, {self.num_classes})")

    def __len__(self) -> int:
        return self.images.shape[0]

    @property
    def sample_shape(self):
        return self.images.shape[1:]


@dataclass
class NormStats:
    mean: np.ndarray
    std: np.ndarray

    def __post_init__(self):
        self.mean = np.asarray(self.mean, dtype=np.float64)
        self.std = np.asarray(self.std, dtype=np.float64)
        if np.any(self.std <= 0):
            raise ValueError("normalization std must be positive")


@dataclass
class LocalLossReport:
    alignment_losses: List[float]
    regularizer_losses: Dict[str, List[float]]
    output_ce: float
    flooding_mask: Optional[np.ndarray] = None

    @property
    def total(self) -> float:
        return (sum(self.alignment_losses) + self.output_ce
                + sum(sum(v) for v in self.regularizer_losses.values()))

    def is_finite(self) -> bool:
        return bool(np.isfinite(self.total))


@dataclass
class CkaMatrix:
    """Rows: forward activations a_0..a_L; columns: feedback activations b_L..b_0"""

    values: np.ndarray
    step: int
    row_labels: List[str] = field(default_factory=list)
    col_labels: List[str] = field(default_factory=list)

    def entry(self, forward_layer: int, feedback_layer: int) -> float:
        depth = self.values.shape[0] - 1
        return float(self.values[forward_layer, depth - feedback_layer])

    def to_dict(self) -> dict:
        return {
            "step": self.step,
            "rows": self.row_labels,
            "columns": self.col_labels,
            "values": self.values.tolist(),
        }


@dataclass
class FlopsReport:
    """Floating-point operations per sample for one training step, by phase"""

    forward: float = 0.0
    feedback: float = 0.0
    loss: float = 0.0
    gradient: float = 0.0
    update: float = 0.0

    @property
    def total(self) -> float:
        return self.forward + self.feedback + self.loss + self.gradient + self.update

    def __add__(self, other: "FlopsReport") -> "FlopsReport":
        return FlopsReport(*(a + b for a, b in zip(asdict(self).values(), asdict(other).values())))

    def to_dict(self) -> dict:
        return {**asdict(self), "total": self.total}


@dataclass
class RunResult:
    seed: int
    config: dict
    train_accuracy: List[float] = field(default_factory=list)
    train_loss: List[float] = field(default_factory=list)
    val_accuracy: List[float] = field(default_factory=list)
    test_accuracy: List[float] = field(default_factory=list)
    test_loss: List[float] = field(default_factory=list)
    final_test_accuracy: Optional[float] = None
    wall_clock_s: float = 0.0
    failed: bool = False
    error: Optional[str] = None
    cka_start: Optional[CkaMatrix] = None
    cka_end: Optional[CkaMatrix] = None

    def to_dict(self) -> dict:
        data = asdict(self)
        data["cka_start"] = self.cka_start.to_dict() if self.cka_start else None
        data["cka_end"] = self.cka_end.to_dict() if self.cka_end else None
        return data


class MetricsRecord(BaseModel):
    """One evaluation snapshot, serialized as one JSON-Lines row"""

    model_config = ConfigDict(extra="forbid")

    schema_version: int = METRICS_SCHEMA_VERSION
    seed: int
    step: int
    epoch: int
    split: str
    accuracy: Optional[float] = None
    loss: Optional[float] = None
    alignment_losses: List[float] = []
    output_ce: Optional[float] = None
    lr_eff_forward: float = 0.0
    lr_eff_feedback: float = 0.0
    cka: Optional[List[List[float]]] = None
    wall_ms: float = 0.0
