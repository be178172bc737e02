"""Focal loss over probability grids, matching the evaluation package.

The loss operates on probabilities (the network ends in a sigmoid), clamps to
[eps, 1-eps] before the logarithm, and by default sums over pixels and
averages over the batch.  With gamma=0, alpha=0.5 it equals half the pixel
cross-entropy exactly.
"""

from __future__ import annotations

import torch

EPS = 1e-7


def focal_loss(
    probs: torch.Tensor,
    labels: torch.Tensor,
    alpha: float = 0.25,
    gamma: float = 2.0,
    reduction: str = "sample_sum",
) -> torch.Tensor:
    if not 0.0 <= alpha <= 1.0:
        raise ValueError("alpha must lie in [0, 1]")
    if gamma < 0.0:
        raise ValueError("gamma must be nonnegative")
    if probs.shape != labels.shape:
        raise ValueError(f"shape mismatch: {tuple(probs.shape)} vs {tuple(labels.shape)}")
    if probs.dim() == 2:
        probs = probs.unsqueeze(0)
        labels = labels.unsqueeze(0)
    positive = labels > 0.5
    p_t = torch.where(positive, probs, 1.0 - probs).clamp(EPS, 1.0 - EPS)
    a_t = torch.where(
        positive,
        torch.as_tensor(alpha, dtype=probs.dtype, device=probs.device),
        torch.as_tensor(1.0 - alpha, dtype=probs.dtype, device=probs.device),
    )
    per_pixel = -a_t * (1.0 - p_t) ** gamma * torch.log(p_t)
    if reduction == "sample_sum":
        return per_pixel.flatten(1).sum(dim=1).mean()
    if reduction == "mean":
        return per_pixel.mean()
    raise ValueError(f"unknown reduction {reduction!r}")
