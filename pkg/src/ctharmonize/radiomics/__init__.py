"""Radiomic feature extraction in six classes: GLCM, GLRLM, NID (NGTDM),
intensity direct, intensity histogram and gradient-orientation histogram."""
from .extract import ExtractConfig, extract_all
from .firstorder import intensity_direct_features, intensity_histogram_features
from .goh import goh_features, orientation_histogram
from .matrices import (INPLANE_OFFSETS, OFFSETS_3D, QuantizedROI, glcm_build, glcm_features,
                       glcm_stats, glrlm_build, glrlm_features, ngtdm_build, ngtdm_features,
                       quantize)
from .vector import CLASSES, Feature, FeatureVector, read_feature_csv, write_feature_csv

__all__ = [
    "CLASSES", "ExtractConfig", "Feature", "FeatureVector", "INPLANE_OFFSETS", "OFFSETS_3D",
    "QuantizedROI", "extract_all", "glcm_build", "glcm_features", "glcm_stats",
    "glrlm_build", "glrlm_features", "goh_features", "intensity_direct_features",
    "intensity_histogram_features", "ngtdm_build", "ngtdm_features", "orientation_histogram",
    "quantize", "read_feature_csv", "write_feature_csv",
]
