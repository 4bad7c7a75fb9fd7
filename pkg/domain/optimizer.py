"""SGD with momentum and the stabilization stack used by the local rules.

Per network and per step the gradients go through: gradient centralization,
global-norm clipping, then the momentum update with a linearly warmed-up
learning rate. Forward and feedback networks keep separate learning rates.
"""

import math
from dataclasses import dataclass, field
from typing import Dict, List, Optional

import numpy as np

from domain.exceptions import DimensionError
from domain.tensor import Tensor

NETWORK_TAGS = ("forward", "feedback")


@dataclass
class OptimState:
    lr_forward: float
    lr_feedback: float = 0.0
    momentum: float = 0.0
    clip_norm: Optional[float] = None
    warmup_steps: int = 200
    centralize: bool = True
    weight_decay: float = 0.0
    step_counter: int = 0
    velocity: Dict[str, Dict[str, Tensor]] = field(default_factory=lambda: {"forward": {}, "feedback": {}})

    def __post_init__(self):
        if self.lr_forward < 0 or self.lr_feedback < 0:
            raise ValueError("learning rates must be non-negative")
        if not 0 <= self.momentum < 1:
            raise ValueError(f"momentum must be in [0, 1), got {self.momentum}")
        if self.clip_norm is not None and self.clip_norm <= 0:
            raise ValueError(f"clip_norm must be positive, got {self.clip_norm}")

    def advance(self) -> int:
        """Start a new training step; call once per batch before the updates"""
        self.step_counter += 1
        return self.step_counter

    @classmethod
    def from_config(cls, config) -> "OptimState":
        return cls(
            lr_forward=config.lr_forward,
            lr_feedback=config.lr_feedback,
            momentum=config.momentum,
            clip_norm=config.clip_norm,
            warmup_steps=config.warmup_steps,
            centralize=config.centralize,
            weight_decay=config.weight_decay,
        )


def lr_effective(state: OptimState, network_tag: str, step: Optional[int] = None) -> float:
    """base * min(1, t / warmup_steps) at step t (the current step by default)"""
    base = state.lr_forward if network_tag == "forward" else state.lr_feedback
    t = state.step_counter if step is None else step
    if state.warmup_steps <= 0:
        return base
    return base * min(1.0, t / state.warmup_steps)


def centralize(grad: Tensor) -> Tensor:
    """Remove each output row's mean over the remaining axes; vectors pass through"""
    if grad.ndim < 2:
        return grad
    axes = tuple(range(1, grad.ndim))
    return grad - grad.mean(axis=axes, keepdims=True)


def clip_by_global_norm(grads: List[Tensor], max_norm: float) -> List[Tensor]:
    if max_norm <= 0:
        raise ValueError(f"max_norm must be positive, got {max_norm}")
    total = math.sqrt(sum(float(np.sum(np.square(g, dtype=np.float64))) for g in grads))
    if total <= max_norm:
        return grads
    scale = max_norm / total
    return [g * np.asarray(scale, dtype=g.dtype) for g in grads]


def sgd_step(state: OptimState, params: Dict[str, Tensor], grads: Dict[str, Tensor],
             network_tag: str) -> Dict[str, Tensor]:
    """Update ``params`` in place from ``grads`` (same keys) and return them.

    A zero effective learning rate leaves the parameters untouched bit for bit.
    """
    if network_tag not in NETWORK_TAGS:
        raise ValueError(f"unknown network tag '{network_tag}'")
    if set(params) != set(grads):
        raise DimensionError(f"parameter and gradient keys differ: {sorted(set(params) ^ set(grads))}")
    for name, g in grads.items():
        if g.shape != params[name].shape:
            raise DimensionError(f"{network_tag}.{name}: gradient {g.shape} != parameter {params[name].shape}")

    lr = lr_effective(state, network_tag)
    if lr == 0:
        return params

    names = sorted(grads)
    processed = []
    for name in names:
        g = grads[name]
        if state.weight_decay:
            g = g + state.weight_decay * params[name]
        processed.append(centralize(g) if state.centralize else g)
    if state.clip_norm is not None:
        processed = clip_by_global_norm(processed, state.clip_norm)

    velocity = state.velocity[network_tag]
    for name, g in zip(names, processed):
        v = velocity.get(name)
        v = g.copy() if v is None else state.momentum * v + g
        velocity[name] = v.astype(params[name].dtype, copy=False)
        params[name] -= np.asarray(lr, dtype=params[name].dtype) * velocity[name]
    return params
