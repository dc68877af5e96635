"""Combined multi-task objective: weighted sub-score and global MSE."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np
import torch

from .clinical import NUM_ITEMS, TARGET_DIM


class LossConfigError(ValueError):
    pass


@dataclass
class LossConfig:
    alpha: float = 0.5
    # Optional per-subscore weights (uniform by default); reserved for
    # adaptive weighting experiments, off in all reference configurations.
    subscore_weights: Optional[Sequence[float]] = None

    def __post_init__(self) -> None:
        if not 0.0 <= self.alpha <= 1.0:
            raise LossConfigError(f"alpha must be in [0, 1], got {self.alpha}")
        if self.subscore_weights is not None:
            if len(self.subscore_weights) != NUM_ITEMS:
                raise LossConfigError(
                    f"subscore_weights needs {NUM_ITEMS} entries, "
                    f"got {len(self.subscore_weights)}"
                )
            if any(w < 0 for w in self.subscore_weights):
                raise LossConfigError("subscore_weights must be non-negative")


def _as_tensor(x) -> torch.Tensor:
    if isinstance(x, torch.Tensor):
        return x
    return torch.as_tensor(np.asarray(x), dtype=torch.float64)


def _check_batch(predictions: torch.Tensor, targets: torch.Tensor) -> None:
    if predictions.ndim != 2 or predictions.shape[1] != TARGET_DIM:
        raise ValueError(f"predictions must be (n, {TARGET_DIM}), got {tuple(predictions.shape)}")
    if predictions.shape != targets.shape:
        raise ValueError(
            f"shape mismatch: predictions {tuple(predictions.shape)} vs "
            f"targets {tuple(targets.shape)}"
        )
    if predictions.shape[0] < 1:
        raise ValueError("empty batch")


def mse_global(predictions, targets) -> torch.Tensor:
    """Mean squared error over the global-score column (index 0)."""
    predictions, targets = _as_tensor(predictions), _as_tensor(targets)
    _check_batch(predictions, targets)
    diff = predictions[:, 0] - targets[:, 0]
    return (diff * diff).mean()

def mse_subscores(predictions, targets, weights=None) -> torch.Tensor:
    """Per-subscore MSE averaged over the 13 items (columns 1..13)."""
    predictions, targets = _as_tensor(predictions), _as_tensor(targets)
    _check_batch(predictions, targets)
    diff = predictions[:, 1:] - targets[:, 1:]
    per_item = (diff * diff).mean(dim=0)
    if weights is None:
        return per_item.mean()
    w = _as_tensor(weights).to(per_item.dtype)
    return (per_item * w).sum() / w.sum()


def total_loss(predictions, targets, config: LossConfig | None = None) -> torch.Tensor:
    """alpha * sub-score MSE + (1 - alpha) * global MSE."""
    config = config or LossConfig()
    sub = mse_subscores(predictions, targets, weights=config.subscore_weights)
    glob = mse_global(predictions, targets)
    return config.alpha * sub + (1.0 - config.alpha) * glob
