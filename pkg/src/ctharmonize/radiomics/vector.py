from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from typing import Iterable, Iterator, NamedTuple

CLASSES = ("GOH", "GLCM", "GLRLM", "ID", "IH", "NID")


class Feature(NamedTuple):
    cls: str
    name: str
    value: float


@dataclass
class FeatureVector:
    """Ordered, class-tagged radiomic features."""

    entries: list[Feature] = field(default_factory=list)

    def __post_init__(self):
        seen = set()
        for f in self.entries:
            self._check(f, seen)

    @staticmethod
    def _check(f: Feature, seen: set) -> None:
        if f.cls not in CLASSES:
            raise ValueError(f"unknown feature class {f.cls!r}")
        if (f.cls, f.name) in seen:
            raise ValueError(f"duplicate feature {f.cls}/{f.name}")
        if not math.isfinite(f.value):
            raise ValueError(f"non-finite value for {f.cls}/{f.name}: {f.value}")
        seen.add((f.cls, f.name))

    @classmethod
    def from_dict(cls, klass: str, values: dict[str, float], suffix: str = "") -> "FeatureVector":
        return cls([Feature(klass, name + suffix, float(v)) for name, v in values.items()])

    def __iter__(self) -> Iterator[Feature]:
        return iter(self.entries)

    def __len__(self) -> int:
        return len(self.entries)

    def __add__(self, other: "FeatureVector") -> "FeatureVector":
        return FeatureVector(self.entries + other.entries)

    def get(self, cls: str, name: str) -> float:
        for f in self.entries:
            if f.cls == cls and f.name == name:
                return f.value
        raise KeyError((cls, name))

    def values(self) -> dict[str, float]:
        """Feature name -> value; names alone must be unique for this view."""
        out = {f.name: f.value for f in self.entries}
        if len(out) != len(self.entries):
            raise ValueError("feature names collide across classes; use as_dict()")
        return out

    def as_dict(self) -> dict[tuple[str, str], float]:
        return {(f.cls, f.name): f.value for f in self.entries}


def write_feature_csv(path, rows: Iterable[tuple[str, str, FeatureVector]]) -> None:
    """rows: (volume_id, roi_id, features). 9 significant digits."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["volume_id", "roi_id", "class", "feature", "value"])
        for vol_id, roi_id, fv in rows:
            for f in fv:
                w.writerow([vol_id, roi_id, f.cls, f.name, f"{f.value:.9g}"])


def read_feature_csv(path) -> dict[tuple[str, str], FeatureVector]:
    """Inverse of :func:`write_feature_csv`, keyed by (volume_id, roi_id)."""
    out: dict[tuple[str, str], list[Feature]] = {}
    with open(path, newline="") as fh:
        for row in csv.DictReader(fh):
            key = (row["volume_id"], row["roi_id"])
            out.setdefault(key, []).append(Feature(row["class"], row["feature"], float(row["value"])))
    return {k: FeatureVector(v) for k, v in out.items()}
