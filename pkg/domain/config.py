"""Training configuration: every hyperparameter of a run, validated before anything starts"""

from typing import List, Literal, Optional

from pydantic import BaseModel, ConfigDict, Field, field_validator, model_validator

# MLP search spaces per rule
CCL_LR_GRID = [0.2, 0.5, 1.0, 1.5, 2.0]
CCL_CLIP_GRID = [0.5, 1.0]
BP_FA_LR_GRID = [0.4, 0.2, 0.1, 0.05, 0.02, 0.01]
BP_FA_CLIP_GRID = [0.5, 1.0]
DRTP_LR_GRID = [0.01, 0.03, 0.1, 0.3]
DRTP_PROJ_MEAN_GRID = [0.0, 0.05]
DRTP_PROJ_STD_GRID = [0.01, 0.03, 0.1, 0.3]

ARCH_HIDDEN = {
    "mlp6x256": [256] * 5,
    "mlp4x1024": [1024] * 3,
}
DEFAULT_CNN_CHANNELS = [64, 128, 256, 256, 512]

DEFAULT_ACTIVATION = {"ccl": "elu", "bp": "tanh", "fa": "tanh", "drtp": "tanh"}
DEFAULT_LR = {"ccl": 0.2, "bp": 0.02, "fa": 0.02, "drtp": 0.01}
CENTRALIZED_TRAINERS = ("ccl", "bp")
CCL_WARMUP_STEPS = 200

_LIST_FIELDS = ("dims", "cnn_channels", "seeds")


class TrainConfig(BaseModel):
    model_config = ConfigDict(extra="forbid")

    dataset: Literal["mnist", "fashion_mnist", "cifar10", "cifar100"] = "mnist"
    arch: Literal["mlp6x256", "mlp4x1024", "cnn5", "custom"] = "mlp6x256"
    dims: Optional[List[int]] = None
    cnn_channels: List[int] = Field(default_factory=lambda: list(DEFAULT_CNN_CHANNELS))
    trainer: Literal["ccl", "bp", "fa", "drtp"] = "ccl"

    lr_forward: Optional[float] = Field(default=None, ge=0)
    lr_feedback: Optional[float] = Field(default=None, ge=0)
    momentum: float = Field(default=0.9, ge=0, lt=1)
    clip_norm: Optional[float] = Field(default=1.0, gt=0)
    centralize: Optional[bool] = None
    weight_decay: float = Field(default=0.0, ge=0)
    warmup_steps: Optional[int] = Field(default=None, ge=0)
    epochs: int = Field(default=20, ge=1)
    batch_size: int = Field(default=32, ge=1)

    regularizer_lambda: float = Field(default=1.0, ge=0)
    flooding_threshold: float = Field(default=0.2, ge=0)
    flooding_metric: Literal["mse", "sse"] = "sse"
    activation: Optional[Literal["elu", "tanh"]] = None
    init_scheme: Literal["kaiming_uniform", "xavier_uniform", "orthogonal"] = "kaiming_uniform"
    dtype: Literal["float32", "float64"] = "float32"
    dedup_feedback: bool = True
    parallel_passes: bool = False

    drtp_mode: Literal["target", "sign"] = "target"
    drtp_proj_mean: float = 0.0
    drtp_proj_std: float = Field(default=0.1, gt=0)

    seeds: List[int] = Field(default_factory=lambda: [0])
    workers: int = Field(default=1, ge=1)
    data_root: Optional[str] = None
    out_dir: str = "runs"
    run_name: Optional[str] = None
    val_fraction: float = Field(default=0.1, gt=0, lt=1)
    train_subset: Optional[int] = Field(default=None, ge=1)
    test_subset: Optional[int] = Field(default=None, ge=1)
    augment: Optional[bool] = None
    eval_interval: int = Field(default=0, ge=0)
    cka_samples: int = Field(default=1000, ge=0)

    @field_validator(*_LIST_FIELDS, mode="before")
    @classmethod
    def _split_lists(cls, value):
        if isinstance(value, str):
            return [part.strip() for part in value.split(",") if part.strip()]
        if isinstance(value, int):
            return [value]
        return value

    @field_validator("clip_norm", "activation", "train_subset", "test_subset",
                     "augment", "dims", "data_root", "run_name",
                     "lr_forward", "lr_feedback", "centralize", "warmup_steps", mode="before")
    @classmethod
    def _none_strings(cls, value):
        if isinstance(value, str) and value.strip().lower() in ("none", "null", ""):
            return None
        return value

    @field_validator("seeds")
    @classmethod
    def _non_negative_seeds(cls, value):
        if not value or any(s < 0 for s in value):
            raise ValueError("seeds must be a non-empty list of non-negative integers")
        return value

    @model_validator(mode="after")
    def _resolve_defaults(self):
        if self.arch == "custom" and not self.dims:
            raise ValueError("arch 'custom' needs dims (hidden layer widths)")
        if self.arch == "cnn5" and len(self.cnn_channels) < 1:
            raise ValueError("cnn5 needs at least one channel entry")
        if self.activation is None:
            self.activation = DEFAULT_ACTIVATION[self.trainer]
        if self.lr_forward is None:
            self.lr_forward = DEFAULT_LR[self.trainer]
        if self.lr_feedback is None:
            self.lr_feedback = self.lr_forward if self.trainer == "ccl" else 0.0
        if self.centralize is None:
            self.centralize = self.trainer in CENTRALIZED_TRAINERS
        if self.warmup_steps is None:
            self.warmup_steps = CCL_WARMUP_STEPS if self.trainer == "ccl" else 0
        if self.augment is None:
            self.augment = self.arch == "cnn5"
        if self.run_name is None:
            self.run_name = f"{self.dataset}_{self.arch}_{self.trainer}"
        return self

    @property
    def is_cnn(self) -> bool:
        return self.arch == "cnn5"

    @property
    def flooding_active(self) -> bool:
        return self.is_cnn and self.flooding_threshold > 0

    def mlp_dims(self, input_dim: int, num_classes: int) -> List[int]:
        hidden = self.dims if self.arch == "custom" else ARCH_HIDDEN[self.arch]
        return [input_dim, *hidden, num_classes]

    def echo(self) -> dict:
        """JSON-safe dump that validates back to an equal config"""
        return self.model_dump(mode="json")
