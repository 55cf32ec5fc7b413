"""Synthetic textured phantoms and two simulated reconstruction kernels.

A phantom is rendered once and then passed through a smoothing kernel
(non-standard image A) and a sharpening kernel (standard image B), so the
pair differs only by reconstruction texture.
"""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from enum import Enum
from pathlib import Path
from typing import Sequence

import numpy as np
from scipy.ndimage import gaussian_filter

from .volume import Volume, load_volume, save_volume


@dataclass(frozen=True)
class Lesion:
    center: tuple[float, float, float]  # (x, y, z) voxel coordinates
    radius_vox: float
    mean_hu: float
    texture_amplitude_hu: float = 0.0
    texture_scale_vox: float = 1.0


@dataclass(frozen=True)
class PhantomSpec:
    dims: tuple[int, int, int]  # (nx, ny, nz)
    background_hu: float = -800.0
    lesions: tuple[Lesion, ...] = ()
    noise_sigma_hu: float = 5.0
    spacing_mm: tuple[float, float, float] = (1.0, 1.0, 1.0)

    def validate(self) -> None:
        if len(self.dims) != 3 or min(self.dims) < 1:
            raise ValueError(f"invalid dims {self.dims}")
        if self.noise_sigma_hu < 0:
            raise ValueError("noise_sigma_hu must be >= 0")
        for k, les in enumerate(self.lesions):
            if les.radius_vox < 1:
                raise ValueError(f"lesion {k}: radius must be >= 1")
            if les.texture_scale_vox < 1:
                raise ValueError(f"lesion {k}: texture scale must be >= 1")
            if not all(0 <= c <= d - 1 for c, d in zip(les.center, self.dims)):
                raise ValueError(f"lesion {k}: center {les.center} outside dims {self.dims}")


class KernelVariant(str, Enum):
    SMOOTH = "smooth"
    SHARP = "sharp"


@dataclass(frozen=True)
class KernelSim:
    variant: KernelVariant
    smooth_sigma_vox: float = 1.5
    sharp_amount: float = 1.0
    sharp_sigma_vox: float = 1.0

    def __post_init__(self):
        object.__setattr__(self, "variant", KernelVariant(self.variant))
        if min(self.smooth_sigma_vox, self.sharp_amount, self.sharp_sigma_vox) <= 0:
            raise ValueError("kernel parameters must be strictly positive")


SMOOTH = KernelSim(KernelVariant.SMOOTH)
SHARP = KernelSim(KernelVariant.SHARP)


@dataclass(frozen=True)
class PhantomTemplate:
    """Ranges from which per-pair phantom specs are drawn."""

    dims: tuple[int, int, int] = (64, 64, 4)
    background_hu: float = -800.0
    n_lesions: tuple[int, int] = (1, 3)
    radius_vox: tuple[float, float] = (6.0, 12.0)
    mean_hu: tuple[float, float] = (0.0, 80.0)
    texture_amplitude_hu: tuple[float, float] = (20.0, 80.0)
    texture_scale_vox: tuple[float, float] = (1.0, 2.5)
    noise_sigma_hu: float = 5.0
    spacing_mm: tuple[float, float, float] = (1.0, 1.0, 1.0)


@dataclass
class PairedScan:
    a: Volume  # non-standard (smooth kernel)
    b: Volume  # standard (sharp kernel)
    seed: int
    spec: PhantomSpec | None = None
    index: int = 0

    def __post_init__(self):
        if self.a.shape != self.b.shape or self.a.spacing_mm != self.b.spacing_mm:
            raise ValueError("paired volumes must share dims and spacing")


def _texture_field(shape, scale: float, rng: np.random.Generator) -> np.ndarray:
    """Unit-variance band-limited noise: white noise smoothed at ``scale`` voxels."""
    white = rng.standard_normal(shape)
    smooth = gaussian_filter(white, sigma=scale, mode="reflect")
    sd = smooth.std()
    return smooth / sd if sd > 0 else smooth


def generate_phantom(spec: PhantomSpec, seed: int) -> Volume:
    spec.validate()
    rng = np.random.default_rng(seed)
    nx, ny, nz = spec.dims
    vol = np.full((nz, ny, nx), spec.background_hu, dtype=np.float64)
    z, y, x = np.ogrid[:nz, :ny, :nx]
    for les in spec.lesions:
        cx, cy, cz = les.center
        inside = (x - cx) ** 2 + (y - cy) ** 2 + (z - cz) ** 2 <= les.radius_vox ** 2
        values = np.full(vol.shape, les.mean_hu)
        # drawn even at zero amplitude so the rng stream does not depend on it
        tex = _texture_field(vol.shape, les.texture_scale_vox, rng)
        if les.texture_amplitude_hu:
            values = values + les.texture_amplitude_hu * tex
        vol[inside] = values[inside]
    if spec.noise_sigma_hu > 0:
        vol += spec.noise_sigma_hu * rng.standard_normal(vol.shape)
    return Volume(vol.astype(np.float32), spec.spacing_mm)


def simulate_kernel(v: Volume, k: KernelSim) -> Volume:
    """Per-slice Gaussian blur (smooth) or unsharp mask (sharp), reflect padded."""
    data = v.data.astype(np.float64)
    # sigma 0 along z keeps the filter in-slice
    if k.variant is KernelVariant.SMOOTH:
        out = gaussian_filter(data, sigma=(0, k.smooth_sigma_vox, k.smooth_sigma_vox), mode="reflect")
    else:
        blur = gaussian_filter(data, sigma=(0, k.sharp_sigma_vox, k.sharp_sigma_vox), mode="reflect")
        out = data + k.sharp_amount * (data - blur)
    return v.with_data(out.astype(np.float32))


def random_spec(template: PhantomTemplate, rng: np.random.Generator) -> PhantomSpec:
    nx, ny, nz = template.dims
    n_les = int(rng.integers(template.n_lesions[0], template.n_lesions[1] + 1))
    lesions = []
    for _ in range(n_les):
        r = float(rng.uniform(*template.radius_vox))
        # keep lesion discs inside the slice plane
        margin = min(r + 2, (min(nx, ny) - 1) / 2)
        cx = float(rng.uniform(margin, nx - 1 - margin))
        cy = float(rng.uniform(margin, ny - 1 - margin))
        cz = (nz - 1) / 2
        lesions.append(Lesion(
            center=(round(cx, 3), round(cy, 3), cz),
            radius_vox=round(r, 3),
            mean_hu=round(float(rng.uniform(*template.mean_hu)), 3),
            texture_amplitude_hu=round(float(rng.uniform(*template.texture_amplitude_hu)), 3),
            texture_scale_vox=round(float(rng.uniform(*template.texture_scale_vox)), 3),
        ))
    return PhantomSpec(template.dims, template.background_hu, tuple(lesions),
                       template.noise_sigma_hu, template.spacing_mm)


def pair_seed(seed: int, index: int) -> int:
    """Per-pair seed, a pure function of (master seed, pair index)."""
    ss = np.random.SeedSequence([int(seed), int(index)])
    return int(ss.generate_state(1, dtype=np.uint32)[0])


def make_pair(index: int, template: PhantomTemplate, k_smooth: KernelSim, k_sharp: KernelSim,
              seed: int) -> PairedScan:
    ps = pair_seed(seed, index)
    rng = np.random.default_rng(ps)
    spec = random_spec(template, rng)
    phantom = generate_phantom(spec, int(rng.integers(2 ** 31)))
    return PairedScan(simulate_kernel(phantom, k_smooth), simulate_kernel(phantom, k_sharp),
                      ps, spec, index)


def make_paired_dataset(n: int, template: PhantomTemplate = PhantomTemplate(),
                        k_smooth: KernelSim = SMOOTH, k_sharp: KernelSim = SHARP,
                        seed: int = 0) -> list[PairedScan]:
    if n < 1:
        raise ValueError("need at least one pair")
    return [make_pair(i, template, k_smooth, k_sharp, seed) for i in range(n)]


# ---------------------------------------------------------------- manifest

@dataclass
class ManifestEntry:
    index: int
    seed: int
    a: str
    b: str
    split: str = "train"
    lesions: list = field(default_factory=list)


def write_dataset(pairs: Sequence[PairedScan], out_dir, n_train: int | None = None,
                  extra: dict | None = None) -> Path:
    """Save pairs as LTDV files plus ``manifest.json``; returns the manifest path."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    if n_train is None:
        n_train = len(pairs)
    entries = []
    for k, p in enumerate(pairs):
        a_name, b_name = f"pair{p.index:04d}_a.ltdv", f"pair{p.index:04d}_b.ltdv"
        save_volume(p.a, out_dir / a_name)
        save_volume(p.b, out_dir / b_name)
        lesions = [asdict(les) for les in p.spec.lesions] if p.spec else []
        entries.append(ManifestEntry(p.index, p.seed, a_name, b_name,
                                     "train" if k < n_train else "eval", lesions))
    manifest = {"pairs": [asdict(e) for e in entries]}
    if extra:
        manifest.update(extra)
    path = out_dir / "manifest.json"
    path.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return path


def read_manifest(path) -> list[ManifestEntry]:
    path = Path(path)
    doc = json.loads(path.read_text())
    entries = []
    for e in doc["pairs"]:
        e = dict(e)
        e["a"] = str(path.parent / e["a"])
        e["b"] = str(path.parent / e["b"])
        entries.append(ManifestEntry(**e))
    return entries


def load_pair(entry: ManifestEntry) -> PairedScan:
    return PairedScan(load_volume(entry.a), load_volume(entry.b), entry.seed, None, entry.index)
