from __future__ import annotations

from typing import Sequence

import numpy as np


def recon_loss(pred: np.ndarray, target: np.ndarray, kind: str = "l2"):
    """Mean squared (l2) or mean absolute (l1) error and its gradient."""
    if pred.shape != target.shape:
        raise ValueError(f"prediction shape {pred.shape} != target shape {target.shape}")
    diff = pred - target
    n = diff.size
    if kind == "l2":
        return float(np.mean(diff.astype(np.float64) ** 2)), diff * diff.dtype.type(2.0 / n)
    if kind == "l1":
        return float(np.mean(np.abs(diff.astype(np.float64)))), np.sign(diff) * diff.dtype.type(1.0 / n)
    raise ValueError(f"unknown reconstruction loss {kind!r}")


def deep_supervision_loss(heads: Sequence[np.ndarray], target: np.ndarray,
                          weights: Sequence[float], kind: str = "l2"):
    """Weighted sum of per-head reconstruction losses; returns (loss, head gradients)."""
    if len(heads) != len(weights):
        raise ValueError(f"{len(heads)} heads but {len(weights)} supervision weights")
    total = 0.0
    grads = []
    for h, w in zip(heads, weights):
        loss, g = recon_loss(h, target, kind)
        total += w * loss
        grads.append(g * g.dtype.type(w))
    return total, grads
