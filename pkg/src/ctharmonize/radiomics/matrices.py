"""Gray-level quantisation and the texture matrices (GLCM, GLRLM, NGTDM)."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np
from scipy.ndimage import correlate

from ..volume import ROIMask, Volume
from .vector import FeatureVector

NGTDM_EPS = 1e-12

# in-slice offsets as (dx, dy)
INPLANE_OFFSETS = ((1, 0), (0, 1), (1, 1), (1, -1))
# one representative of each of the 13 unique 3D neighbour directions, (dx, dy, dz)
OFFSETS_3D = tuple(
    (dx, dy, dz)
    for dz in (0, 1) for dy in (-1, 0, 1) for dx in (-1, 0, 1)
    if (dz, dy, dx) > (0, 0, 0)
)


@dataclass(frozen=True, eq=False)
class QuantizedROI:
    """Integer levels 1..ng inside the ROI, 0 outside; array layout (nz, ny, nx)."""

    levels: np.ndarray
    ng: int
    value_range: tuple[float, float]

    @property
    def mask(self) -> np.ndarray:
        return self.levels > 0


def _roi_values(v: Volume, m: ROIMask) -> np.ndarray:
    if m.mask.shape != v.data.shape:
        raise ValueError(f"mask shape {m.mask.shape} != volume shape {v.data.shape}")
    return v.data[m.mask].astype(np.float64)


def quantize_array(data: np.ndarray, mask: np.ndarray, ng: int) -> QuantizedROI:
    if ng < 2:
        raise ValueError("need at least 2 gray levels")
    n = int(np.count_nonzero(mask))
    if n < 2:
        raise ValueError(f"ROI has {n} voxel(s); quantisation needs at least 2")
    vals = data[mask].astype(np.float64)
    lo, hi = float(vals.min()), float(vals.max())
    levels = np.zeros(data.shape, dtype=np.int32)
    if hi > lo:
        q = np.floor((vals - lo) / (hi - lo) * ng).astype(np.int64) + 1
        levels[mask] = np.minimum(q, ng)
    else:
        levels[mask] = 1
    return QuantizedROI(levels, ng, (lo, hi))


def quantize(v: Volume, m: ROIMask, ng: int = 32) -> QuantizedROI:
    """Equal-width binning of ROI values over [min, max]; the top bin is closed."""
    if m.mask.shape != v.data.shape:
        raise ValueError(f"mask shape {m.mask.shape} != volume shape {v.data.shape}")
    return quantize_array(v.data, m.mask, ng)


# ------------------------------------------------------------------ GLCM

def _shifted_pairs(levels: np.ndarray, offset: Sequence[int]):
    """Level arrays (a, b) for every voxel pair p, p + offset inside the grid."""
    dx, dy, dz = offset
    src, dst = [], []
    for d, n in zip((dz, dy, dx), levels.shape):
        src.append(slice(max(0, -d), n - max(0, d)))
        dst.append(slice(max(0, d), n - max(0, -d)))
    return levels[tuple(src)], levels[tuple(dst)]


def glcm_build(q: QuantizedROI, offset: Sequence[int], symmetric: bool = False) -> np.ndarray:
    """Normalised co-occurrence matrix for one offset.

    A 2-tuple ``(dx, dy)`` is an in-slice offset accumulated over all
    slices (2.5D); a 3-tuple ``(dx, dy, dz)`` is a volumetric offset.
    """
    offset = tuple(int(o) for o in offset)
    if len(offset) == 2:
        offset = offset + (0,)
    if len(offset) != 3 or not any(offset):
        raise ValueError(f"offset must be a non-zero 2- or 3-vector, got {offset}")
    ng = q.ng
    a, b = _shifted_pairs(q.levels, offset)
    keep = (a > 0) & (b > 0)
    if not keep.any():
        raise ValueError(f"no in-ROI voxel pairs at offset {offset}")
    idx = (a[keep].astype(np.int64) - 1) * ng + (b[keep] - 1)
    counts = np.bincount(idx, minlength=ng * ng).reshape(ng, ng).astype(np.float64)
    if symmetric:
        counts = counts + counts.T
    return counts / counts.sum()


def glcm_stats(p: np.ndarray) -> dict[str, float]:
    ng = p.shape[0]
    lv = np.arange(1, ng + 1, dtype=np.float64)
    i, j = np.meshgrid(lv, lv, indexing="ij")
    nz = p > 0
    pi, pj = p.sum(axis=1), p.sum(axis=0)
    mu_i, mu_j = (lv * pi).sum(), (lv * pj).sum()
    sd_i = np.sqrt(((lv - mu_i) ** 2 * pi).sum())
    sd_j = np.sqrt(((lv - mu_j) ** 2 * pj).sum())
    if sd_i < 1e-12 or sd_j < 1e-12:
        corr = 0.0
    else:
        corr = float(((i - mu_i) * (j - mu_j) * p).sum() / (sd_i * sd_j))
    return {
        "contrast": float((p * (i - j) ** 2).sum()),
        "energy": float((p ** 2).sum()),
        "homogeneity": float((p / (1.0 + np.abs(i - j))).sum()),
        "entropy": float(-(p[nz] * np.log2(p[nz])).sum()),
        "correlation": corr,
    }


def glcm_features(p: np.ndarray, suffix: str = "") -> FeatureVector:
    return FeatureVector.from_dict("GLCM", glcm_stats(p), suffix)


# ----------------------------------------------------------------- GLRLM

def _lines(plane: np.ndarray, direction: Sequence[int]) -> list[np.ndarray]:
    dx, dy = direction
    if (dx, dy) == (1, 0):
        return list(plane)
    if (dx, dy) == (0, 1):
        return list(plane.T)
    if (dx, dy) == (1, 1):
        return [plane.diagonal(k) for k in range(-plane.shape[0] + 1, plane.shape[1])]
    if (dx, dy) == (1, -1):
        flipped = plane[::-1]
        return [flipped.diagonal(k) for k in range(-plane.shape[0] + 1, plane.shape[1])]
    raise ValueError(f"unsupported run direction {direction}")


def _runs(line: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """(level, length) of maximal runs of equal non-zero level."""
    if line.size == 0:
        return np.empty(0, np.int64), np.empty(0, np.int64)
    change = np.flatnonzero(np.diff(line)) + 1
    starts = np.concatenate(([0], change))
    lengths = np.diff(np.concatenate((starts, [line.size])))
    levels = line[starts]
    keep = levels > 0
    return levels[keep].astype(np.int64), lengths[keep].astype(np.int64)


def glrlm_build(q: QuantizedROI, direction: Sequence[int] = (1, 0)) -> np.ndarray:
    """Run-length matrix R[level-1, length-1] summed over slices."""
    nz, ny, nx = q.levels.shape
    max_len = max(nx, ny)
    r = np.zeros((q.ng, max_len), dtype=np.int64)
    for plane in q.levels:
        # 0 separators keep runs from crossing line boundaries
        lines = _lines(plane, direction)
        joined = np.concatenate([np.append(ln, 0) for ln in lines])
        lev, length = _runs(joined)
        np.add.at(r, (lev - 1, length - 1), 1)
    return r


def glrlm_matrix_features(r: np.ndarray) -> dict[str, float]:
    r = r.astype(np.float64)
    n_runs = r.sum()
    if n_runs == 0:
        raise ValueError("run-length matrix is empty")
    lengths = np.arange(1, r.shape[1] + 1, dtype=np.float64)
    n_vox = (r * lengths).sum()
    return {
        "sre": float((r / lengths ** 2).sum() / n_runs),
        "lre": float((r * lengths ** 2).sum() / n_runs),
        "gln": float((r.sum(axis=1) ** 2).sum() / n_runs),
        "rln": float((r.sum(axis=0) ** 2).sum() / n_runs),
        "rp": float(n_runs / n_vox),
    }


def glrlm_features(q: QuantizedROI, direction: Sequence[int] = (1, 0)) -> FeatureVector:
    return FeatureVector.from_dict("GLRLM", glrlm_matrix_features(glrlm_build(q, direction)))


# ----------------------------------------------------------------- NGTDM

def _check_extent(mask: np.ndarray, axes: Sequence[int]) -> None:
    idx = np.nonzero(mask)
    for ax in axes:
        if idx[ax].size == 0 or idx[ax].max() - idx[ax].min() + 1 < 3:
            raise ValueError("ROI is smaller than the 3-voxel neighbourhood")


def ngtdm_build(q: QuantizedROI, mode: str = "2.5d") -> tuple[np.ndarray, np.ndarray]:
    """Return (s, n): per-level summed |level - neighbourhood mean| and voxel counts.

    Only ROI voxels with at least one in-ROI neighbour contribute. The
    neighbourhood is 3x3 in-slice for ``2.5d`` and 3x3x3 for ``3d``; the
    centre voxel is excluded either way.
    """
    mask = q.mask
    if mode == "2.5d":
        kernel = np.ones((1, 3, 3))
        kernel[0, 1, 1] = 0
        _check_extent(mask, (1, 2))
    elif mode == "3d":
        kernel = np.ones((3, 3, 3))
        kernel[1, 1, 1] = 0
        _check_extent(mask, (0, 1, 2))
    else:
        raise ValueError(f"mode must be '2.5d' or '3d', got {mode!r}")
    lv = q.levels.astype(np.float64)
    nb_sum = correlate(lv, kernel, mode="constant", cval=0.0)
    nb_cnt = correlate(mask.astype(np.float64), kernel, mode="constant", cval=0.0)
    valid = mask & (nb_cnt > 0)
    lev = q.levels[valid]
    diff = np.abs(lev - nb_sum[valid] / nb_cnt[valid])
    s = np.bincount(lev - 1, weights=diff, minlength=q.ng)
    n = np.bincount(lev - 1, minlength=q.ng).astype(np.float64)
    return s, n


def ngtdm_matrix_features(s: np.ndarray, n: np.ndarray) -> dict[str, float]:
    n_vp = n.sum()
    p = n / n_vp
    lv = np.arange(1, len(s) + 1, dtype=np.float64)
    occ = p > 0
    ps, pl, ss = p[occ], lv[occ], s[occ]
    ng_p = int(occ.sum())
    psum = float((p * s).sum())
    coarseness = 1.0 / (NGTDM_EPS + psum)
    li, lj = np.meshgrid(pl, pl, indexing="ij")
    pi, pj = np.meshgrid(ps, ps, indexing="ij")
    si, sj = np.meshgrid(ss, ss, indexing="ij")
    if ng_p > 1:
        contrast = float((pi * pj * (li - lj) ** 2).sum() / (ng_p * (ng_p - 1)) * s.sum() / n_vp)
    else:
        contrast = 0.0
    busy_den = np.abs(li * pi - lj * pj).sum()
    busyness = float(psum / busy_den) if busy_den > 0 else 0.0
    complexity = float((np.abs(li - lj) * (pi * si + pj * sj) / (pi + pj)).sum() / n_vp)
    s_total = s.sum()
    strength = float(((pi + pj) * (li - lj) ** 2).sum() / (NGTDM_EPS + s_total)) if s_total > 0 else 0.0
    return {
        "coarseness": coarseness,
        "contrast": contrast,
        "busyness": busyness,
        "complexity": complexity,
        "strength": strength,
    }


def ngtdm_features(q: QuantizedROI, mode: str = "2.5d") -> FeatureVector:
    s, n = ngtdm_build(q, mode)
    return FeatureVector.from_dict("NID", ngtdm_matrix_features(s, n), "_" + mode)
