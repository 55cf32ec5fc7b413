import numpy as np

from ..volume import ROIMask, Volume
from .vector import FeatureVector


def orientation_histogram(data: np.ndarray, mask: np.ndarray, nbins: int = 16) -> np.ndarray:
    """Magnitude-weighted histogram of in-slice gradient orientation.

    Gradients are central differences, so only ROI voxels whose four
    in-slice neighbours are also in the ROI are used. Bin ``k`` is centred
    on ``2*pi*k/nbins``; bin 0 therefore holds gradients pointing along +x.
    """
    if nbins < 1:
        raise ValueError("nbins must be positive")
    v = data.astype(np.float64)
    interior = np.zeros_like(mask, dtype=bool)
    interior[:, 1:-1, 1:-1] = (mask[:, 1:-1, 1:-1] & mask[:, 1:-1, 2:] & mask[:, 1:-1, :-2]
                               & mask[:, 2:, 1:-1] & mask[:, :-2, 1:-1])
    if not interior.any():
        raise ValueError("ROI has no interior voxels for central differences")
    gx = np.zeros_like(v)
    gy = np.zeros_like(v)
    gx[:, :, 1:-1] = (v[:, :, 2:] - v[:, :, :-2]) / 2
    gy[:, 1:-1, :] = (v[:, 2:, :] - v[:, :-2, :]) / 2
    gx, gy = gx[interior], gy[interior]
    mag = np.hypot(gx, gy)
    total = mag.sum()
    if total == 0:
        return np.full(nbins, 1.0 / nbins)
    theta = np.arctan2(gy, gx)
    bins = np.rint(theta / (2 * np.pi / nbins)).astype(np.int64) % nbins
    hist = np.bincount(bins, weights=mag, minlength=nbins)
    return hist / total


def goh_features(v: Volume, m: ROIMask, nbins: int = 16) -> FeatureVector:
    if m.mask.shape != v.data.shape:
        raise ValueError(f"mask shape {m.mask.shape} != volume shape {v.data.shape}")
    h = orientation_histogram(v.data, m.mask, nbins)
    nz = h > 0
    feats = {f"bin_{k:02d}": h[k] for k in range(nbins)}
    feats["orientation_entropy"] = -(h[nz] * np.log2(h[nz])).sum()
    return FeatureVector.from_dict("GOH", feats)
