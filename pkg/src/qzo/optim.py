"""ZO-SGD update with clipping already applied and non-negative projection.

The update replays the perturbation stream of the matching estimate call and
walks the coordinates in the same registration order:
params_i -= lr * d_clipped * z_i, then coordinates carrying the
non-negativity constraint (quantization scales) are projected to max(., 0).
There are no optimizer states.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .rng import SeededNormalStream
from .zo import PerturbSpec

LR_SCHEDULES = ("constant", "linear-decay")


@dataclass
class TrainConfig:
    """Run hyperparameters. clip_threshold may be math.inf (clipping off)."""

    learning_rate: float = 1e-7
    steps: int = 20000
    batch_size: int = 16
    epsilon: float = 1e-3
    clip_threshold: float = 100.0
    master_seed: int = 0
    lr_schedule: str = "constant"

    def __post_init__(self):
        if not (self.learning_rate > 0):
            raise ValueError("learning_rate must be positive")
        if self.steps < 1:
            raise ValueError("steps must be >= 1")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if not (self.epsilon > 0):
            raise ValueError("epsilon must be positive")
        if math.isnan(self.clip_threshold) or self.clip_threshold < 0:
            raise ValueError("clip_threshold must be non-negative (inf disables clipping)")
        if self.lr_schedule not in LR_SCHEDULES:
            raise ValueError(f"lr_schedule must be one of {LR_SCHEDULES}")


def schedule_lr(config: TrainConfig, t: int) -> float:
    """Learning rate at step t (1-based); linear decay stays positive for t <= steps."""
    if not 1 <= t <= config.steps:
        raise ValueError(f"step {t} outside 1..{config.steps}")
    if config.lr_schedule == "constant":
        return config.learning_rate
    return config.learning_rate * (1.0 - (t - 1) / config.steps)


def zo_sgd_step(
    params: np.ndarray,
    d_clipped: float,
    spec: PerturbSpec,
    lr: float,
    nonneg_mask: np.ndarray | None = None,
) -> None:
    """In-place ZO-SGD update; masked coordinates are projected to >= 0."""
    if not math.isfinite(lr * d_clipped):
        raise ValueError(f"non-finite update scale lr*d = {lr * d_clipped}")
    stream = SeededNormalStream(spec.seed)
    z = stream.normals(params.shape[0])
    params -= (lr * d_clipped) * z
    if nonneg_mask is not None:
        np.maximum(params, 0.0, out=params, where=nonneg_mask)
