"""Intensity-direct (raw HU statistics) and intensity-histogram features."""
import numpy as np

from ..volume import ROIMask, Volume
from .matrices import _roi_values, quantize
from .vector import FeatureVector


def intensity_direct_features(v: Volume, m: ROIMask) -> FeatureVector:
    x = _roi_values(v, m)
    if x.size == 0:
        raise ValueError("empty ROI")
    mean = x.mean()
    dev = x - mean
    var = (dev ** 2).mean()
    if var > 0:
        skew = (dev ** 3).mean() / var ** 1.5
        kurt = (dev ** 4).mean() / var ** 2 - 3.0
    else:
        skew = kurt = 0.0
    p10, p50, p90 = np.percentile(x, [10, 50, 90])
    return FeatureVector.from_dict("ID", {
        "mean": mean,
        "variance": var,
        "skewness": skew,
        "kurtosis": kurt,
        "energy": (x ** 2).sum(),
        "minimum": x.min(),
        "maximum": x.max(),
        "median": p50,
        "p10": p10,
        "p90": p90,
    })


def intensity_histogram_features(v: Volume, m: ROIMask, nbins: int = 16) -> FeatureVector:
    """Features of the equal-width histogram; everything is in bin-index units."""
    q = quantize(v, m, nbins)
    levels = q.levels[q.mask]
    counts = np.bincount(levels, minlength=nbins + 1)[1:].astype(np.float64)
    p = counts / counts.sum()
    nz = p > 0
    q1, q3 = np.percentile(levels, [25, 75])
    return FeatureVector.from_dict("IH", {
        "entropy": -(p[nz] * np.log2(p[nz])).sum(),
        "uniformity": (p ** 2).sum(),
        "mode_bin_center": float(np.argmax(counts) + 1),
        "qcod": (q3 - q1) / (q3 + q1),
    })
