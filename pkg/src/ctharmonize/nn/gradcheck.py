"""Central finite-difference checks of analytic gradients (run in float64)."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np


@dataclass
class GradCheckReport:
    max_rel_err: dict[str, float]
    checked: dict[str, int]

    @property
    def worst(self) -> float:
        return max(self.max_rel_err.values()) if self.max_rel_err else 0.0

    def passed(self, tol: float = 1e-3) -> bool:
        return self.worst <= tol


def rel_err(analytic: np.ndarray, numeric: np.ndarray, floor: float = 1e-8) -> np.ndarray:
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), floor)
    return np.abs(analytic - numeric) / denom


def grad_check(loss_and_grads: Callable[[], tuple[float, dict[str, np.ndarray]]],
               arrays: dict[str, np.ndarray], h: float = 1e-4, max_entries: int | None = 24,
               rng: np.random.Generator | None = None) -> GradCheckReport:
    """Compare analytic gradients with central differences.

    ``arrays`` maps block names to the float64 arrays that ``loss_and_grads``
    reads; entries are perturbed in place and restored. At most
    ``max_entries`` randomly chosen entries per block are probed.
    """
    rng = rng or np.random.default_rng(0)
    _, analytic = loss_and_grads()
    analytic = {k: np.array(v, dtype=np.float64) for k, v in analytic.items()}
    errs, counts = {}, {}
    for name, arr in arrays.items():
        if arr.dtype != np.float64:
            raise TypeError(f"{name}: grad_check needs float64 arrays, got {arr.dtype}")
        flat = arr.reshape(-1)
        idx = np.arange(flat.size)
        if max_entries is not None and flat.size > max_entries:
            idx = rng.choice(flat.size, size=max_entries, replace=False)
        num = np.empty(len(idx))
        for k, e in enumerate(idx):
            old = flat[e]
            flat[e] = old + h
            lp, _ = loss_and_grads()
            flat[e] = old - h
            lm, _ = loss_and_grads()
            flat[e] = old
            num[k] = (lp - lm) / (2 * h)
        errs[name] = float(rel_err(analytic[name].reshape(-1)[idx], num).max())
        counts[name] = len(idx)
    return GradCheckReport(errs, counts)
