from __future__ import annotations

import torch


class LossError(ValueError):
    pass


def mse_loss(pred: torch.Tensor, target: torch.Tensor) -> torch.Tensor:
    """(1 / 2N) * sum_i ||pred_i - target_i||^2 with N = pred.shape[0] batch items."""
    if pred.shape != target.shape:
        raise LossError(f"shape mismatch: {tuple(pred.shape)} vs {tuple(target.shape)}")
    if pred.shape[0] == 0:
        raise LossError("empty batch")
    loss = (pred - target).pow(2).sum() / (2 * pred.shape[0])
    if not torch.isfinite(loss):
        raise LossError("non-finite loss")
    return loss
