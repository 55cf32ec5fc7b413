"""Concordance correlation, relative error and class-grouped CCC reports."""
from __future__ import annotations

import csv
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np

from .radiomics.vector import CLASSES, FeatureVector

REL_EPS = 1e-12


def ccc(s: Sequence[float], t: Sequence[float]) -> float:
    """Lin's concordance correlation coefficient with population moments.

    Degenerate cases: both inputs constant gives 1 if their means agree
    and 0 otherwise; exactly one constant input gives 0.
    """
    s = np.asarray(s, dtype=np.float64)
    t = np.asarray(t, dtype=np.float64)
    if s.shape != t.shape or s.ndim != 1:
        raise ValueError(f"ccc needs two equal-length 1D sequences, got {s.shape} and {t.shape}")
    if s.size < 2:
        raise ValueError("ccc needs at least 2 values")
    mu_s, mu_t = s.mean(), t.mean()
    ds, dt = s - mu_s, t - mu_t
    var_s, var_t = (ds * ds).mean(), (dt * dt).mean()
    if var_s == 0 and var_t == 0:
        return 1.0 if mu_s == mu_t else 0.0
    if var_s == 0 or var_t == 0:
        return 0.0
    # 2 * rho * sd_s * sd_t is the covariance
    cov = (ds * dt).mean()
    return float(2 * cov / (var_s + var_t + (mu_s - mu_t) ** 2))


def relative_error(s: float, t: float) -> float:
    """|s - t| / |t|, with ``t`` the reference (standard-image) value."""
    return abs(s - t) / max(abs(t), REL_EPS)


@dataclass
class CCCReport:
    rows: list[tuple[str, str, float]] = field(default_factory=list)  # (class, feature, ccc)
    summary: dict[str, tuple[float, float, int]] = field(default_factory=dict)  # class -> mean, std, n

    def mean(self, cls: str) -> float:
        return self.summary[cls][0]

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["class", "feature", "ccc"])
            for cls, name, c in self.rows:
                w.writerow([cls, name, f"{c:.9g}"])
            w.writerow([])
            w.writerow(["class", "mean", "std", "n"])
            for cls, (m, sd, n) in self.summary.items():
                w.writerow([cls, f"{m:.9g}", f"{sd:.9g}", n])

    @classmethod
    def from_csv(cls, path) -> "CCCReport":
        rep = cls()
        with open(path, newline="") as fh:
            lines = list(csv.reader(fh))
        split = lines.index([])
        for cls_, name, c in lines[1:split]:
            rep.rows.append((cls_, name, float(c)))
        for cls_, m, sd, n in lines[split + 2:]:
            rep.summary[cls_] = (float(m), float(sd), int(n))
        return rep


FeatureTable = Mapping[str, FeatureVector]  # roi id -> features


def _check_keys(std: FeatureTable, syn: FeatureTable) -> None:
    problems = []
    missing_rois = sorted(set(std) ^ set(syn))
    if missing_rois:
        problems.append(f"ROIs present in only one table: {missing_rois}")
    for roi in sorted(set(std) & set(syn)):
        a, b = set(std[roi].as_dict()), set(syn[roi].as_dict())
        if a != b:
            problems.append(f"ROI {roi}: features only in one table: {sorted(a ^ b)}")
    if problems:
        raise KeyError("; ".join(problems))


def group_ccc(features_std: FeatureTable, features_syn: FeatureTable,
              grouping: Mapping[str, str] | None = None) -> CCCReport:
    """Per-feature CCC across ROIs, then mean and population std per class.

    ``grouping`` optionally maps feature name to a reporting class; by
    default the class tag carried by each feature is used.
    """
    _check_keys(features_std, features_syn)
    rois = sorted(features_std)
    if len(rois) < 2:
        raise ValueError("group_ccc needs at least 2 ROIs")
    keys = list(features_std[rois[0]].as_dict())
    std_tab = {r: features_std[r].as_dict() for r in rois}
    syn_tab = {r: features_syn[r].as_dict() for r in rois}
    rep = CCCReport()
    per_class: dict[str, list[float]] = {}
    for cls, name in keys:
        c = ccc([std_tab[r][(cls, name)] for r in rois], [syn_tab[r][(cls, name)] for r in rois])
        group = grouping.get(name, cls) if grouping else cls
        rep.rows.append((group, name, c))
        per_class.setdefault(group, []).append(c)
    order = [c for c in CLASSES if c in per_class] + sorted(set(per_class) - set(CLASSES))
    for cls in order:
        vals = np.array(per_class[cls])
        rep.summary[cls] = (float(vals.mean()), float(vals.std()), len(vals))
    return rep


def relative_error_table(features_std: FeatureTable, features_syn: FeatureTable):
    """Rows (roi, class, feature, relative error), standard values as reference."""
    _check_keys(features_std, features_syn)
    rows = []
    for roi in sorted(features_std):
        ref = features_std[roi].as_dict()
        syn = features_syn[roi].as_dict()
        for key, t in ref.items():
            rows.append((roi, key[0], key[1], relative_error(syn[key], t)))
    return rows


def mean_relative_error(rows, cls: str | None = None) -> float:
    """Mean over features of the per-feature mean relative error across ROIs."""
    per_feat: dict[tuple[str, str], list[float]] = {}
    for _, c, name, e in rows:
        if cls is None or c == cls:
            per_feat.setdefault((c, name), []).append(e)
    return float(np.mean([np.mean(v) for v in per_feat.values()]))


def write_relative_error_csv(path, rows) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["roi_id", "class", "feature", "relative_error"])
        for roi, cls, name, e in rows:
            w.writerow([roi, cls, name, f"{e:.9g}"])
