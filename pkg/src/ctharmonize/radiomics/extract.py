from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ..volume import ROIMask, Volume
from .firstorder import intensity_direct_features, intensity_histogram_features
from .goh import goh_features
from .matrices import (INPLANE_OFFSETS, OFFSETS_3D, glcm_build, glcm_stats, glrlm_build,
                       glrlm_matrix_features, ngtdm_features, quantize)
from .vector import FeatureVector


@dataclass(frozen=True)
class ExtractConfig:
    ng: int = 32
    nbins: int = 16
    goh_bins: int = 16


def _mean_dicts(dicts: list[dict[str, float]]) -> dict[str, float]:
    return {k: float(np.mean([d[k] for d in dicts])) for k in dicts[0]}


def _glcm_averaged(q, offsets) -> dict[str, float]:
    feats = []
    for off in offsets:
        try:
            p = glcm_build(q, off, symmetric=True)
        except ValueError:
            continue  # thin ROI: no pairs along this offset
        feats.append(glcm_stats(p))
    if not feats:
        raise ValueError("no GLCM offset has in-ROI voxel pairs")
    return _mean_dicts(feats)


def extract_all(v: Volume, m: ROIMask, cfg: ExtractConfig = ExtractConfig()) -> FeatureVector:
    """All six feature classes in a fixed order: GLCM, GLRLM, NID, ID, IH, GOH."""
    q = quantize(v, m, cfg.ng)
    fv = FeatureVector.from_dict("GLCM", _glcm_averaged(q, INPLANE_OFFSETS), "_2.5d")
    fv += FeatureVector.from_dict("GLCM", _glcm_averaged(q, OFFSETS_3D), "_3d")
    runs = [glrlm_matrix_features(glrlm_build(q, d)) for d in INPLANE_OFFSETS]
    fv += FeatureVector.from_dict("GLRLM", _mean_dicts(runs))
    fv += ngtdm_features(q, "2.5d")
    fv += ngtdm_features(q, "3d")
    fv += intensity_direct_features(v, m)
    fv += intensity_histogram_features(v, m, cfg.nbins)
    fv += goh_features(v, m, cfg.goh_bins)
    return fv
