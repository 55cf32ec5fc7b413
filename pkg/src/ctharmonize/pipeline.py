"""Training phases, end-to-end standardisation and feature-level evaluation.

Phase 1 trains the encoder-decoder on every slice of the training pairs,
A and B alike. Phase 2 freezes it, encodes each training pair once and
fits the conditional latent denoiser. Standardisation is the composition
of the two: encode A, sample a standard latent conditioned on A's latent,
decode with A's skip maps.
"""
from __future__ import annotations

import csv
import json
import logging
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
from scipy.ndimage import gaussian_filter

from . import ddpm
from .metrics import (CCCReport, group_ccc, mean_relative_error, relative_error_table,
                      write_relative_error_csv)
from .nn.checkpoint import load_checkpoint, save_checkpoint
from .nn.losses import deep_supervision_loss
from .nn.optim import Adam
from .nn.unetpp import NetConfig, UNetPP, head_columns
from .phantom import ManifestEntry, load_pair, read_manifest
from .radiomics import ExtractConfig, FeatureVector, extract_all, write_feature_csv
from .seeding import substream
from .volume import PAPER_WINDOWS, ROIMask, Volume, roi_from_sphere, roi_from_window

log = logging.getLogger(__name__)

# network input scaling: x = (HU - HU_CENTER) / HU_SCALE
HU_CENTER = -400.0
HU_SCALE = 500.0

METHODS = ("ltdiff", "autoencoder", "ddpm-only")


class NumericError(RuntimeError):
    """Raised when a training loss becomes non-finite."""


class DataError(ValueError):
    """Missing, empty or inconsistent input data."""


@dataclass
class RunConfig:
    manifest: str = ""
    out_dir: str = "run"
    seed: int = 0
    method: str = "ltdiff"
    # encoder-decoder
    depth: int = 4
    base_channels: int = 16
    latent_dim: int = 128
    arch: str = "unetpp"
    recon_loss: str = "l2"
    # training
    epochs1: int = 40
    epochs2: int = 60
    batch: int = 8
    lr: float = 1e-3
    lr2: float = 1e-3
    skip_aug_p: float = 1.0
    skip_aug_sigma: float = 1.5
    # diffusion
    T: int = 200
    beta_first: float = 1e-4
    beta_last: float = 0.02
    hidden: int = 256
    n_layers: int = 3
    temb_dim: int = 64
    lam: float = 0.1
    lambda_aux: float = 0.0
    # inference
    start_mode: str = "truncated:100"
    crop: bool = True

    def __post_init__(self):
        if self.epochs1 < 1 or self.epochs2 < 1:
            raise ValueError("epochs must be >= 1")
        if self.batch < 1:
            raise ValueError("batch must be >= 1")
        if self.method not in METHODS:
            raise ValueError(f"method must be one of {METHODS}, got {self.method!r}")
        if not 0 <= self.skip_aug_p <= 1:
            raise ValueError("skip_aug_p must be in [0, 1]")
        self.net()
        ddpm.parse_start_mode(self.start_mode)

    def net(self) -> NetConfig:
        return NetConfig(self.depth, self.base_channels, self.latent_dim, self.arch, self.recon_loss)

    def schedule(self) -> ddpm.NoiseSchedule:
        return ddpm.make_schedule(self.T, self.beta_first, self.beta_last)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        known = {f.name for f in fields(cls)}
        unknown = sorted(set(d) - known)
        if unknown:
            raise ValueError(f"unknown config keys: {unknown}")
        return cls(**d)


# ------------------------------------------------------------------ data

def to_net(hu: np.ndarray) -> np.ndarray:
    return ((np.asarray(hu, dtype=np.float32) - HU_CENTER) / HU_SCALE).astype(np.float32)


def from_net(x: np.ndarray) -> np.ndarray:
    return (np.asarray(x, dtype=np.float32) * HU_SCALE + HU_CENTER).astype(np.float32)


def crop_box(ny: int, nx: int, factor: int, crop: bool) -> tuple[slice, slice]:
    """Centered in-plane window whose sides are multiples of ``factor``."""
    if ny % factor == 0 and nx % factor == 0:
        return slice(0, ny), slice(0, nx)
    if not crop:
        raise DataError(f"slice size {ny}x{nx} is not divisible by {factor}; "
                        "crop or pad the volume, or enable center cropping")
    hy, hx = ny - ny % factor, nx - nx % factor
    if hy == 0 or hx == 0:
        raise DataError(f"slice size {ny}x{nx} is smaller than {factor}")
    oy, ox = (ny - hy) // 2, (nx - hx) // 2
    return slice(oy, oy + hy), slice(ox, ox + hx)


def volume_slices(v: Volume, factor: int, crop: bool = True) -> np.ndarray:
    """(nz, H, W, 1) network-scaled slices of ``v``."""
    sy, sx = crop_box(v.shape[1], v.shape[2], factor, crop)
    return to_net(v.data[:, sy, sx])[..., None]


def load_entries(manifest, split: str | None = None) -> list[ManifestEntry]:
    path = Path(manifest)
    if not path.is_file():
        raise DataError(f"manifest not found: {path}")
    entries = read_manifest(path)
    if split is not None:
        entries = [e for e in entries if e.split == split]
    if not entries:
        raise DataError(f"no {split or ''} pairs in {path}".replace("  ", " "))
    return entries


def _slices_of(entries: Sequence[ManifestEntry], factor: int, crop: bool):
    a, b = [], []
    for e in entries:
        p = load_pair(e)
        a.append(volume_slices(p.a, factor, crop))
        b.append(volume_slices(p.b, factor, crop))
    return np.concatenate(a), np.concatenate(b)


def _batches(n: int, batch: int, rng: np.random.Generator):
    order = rng.permutation(n)
    return [order[k:k + batch] for k in range(0, n, batch)]


def degrade_skips(x: np.ndarray, p: float, max_sigma: float, rng: np.random.Generator) -> np.ndarray:
    """Blur a random subset of slices in-plane; the copy feeds the skip pathway only.

    Without this the skips alone can reconstruct the input and the latent
    carries nothing about texture sharpness.
    """
    out = x.copy()
    for k in range(x.shape[0]):
        use = rng.random() < p
        sigma = rng.uniform(0.0, max_sigma)
        if use and sigma > 0:
            out[k, ..., 0] = gaussian_filter(x[k, ..., 0].astype(np.float64), sigma, mode="reflect")
    return out


def _write_curve(path: Path, losses: Sequence[float]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["epoch", "loss"])
        for k, v in enumerate(losses, 1):
            w.writerow([k, f"{v:.9g}"])


def read_curve(path) -> list[float]:
    with open(path, newline="") as fh:
        return [float(r["loss"]) for r in csv.DictReader(fh)]


def _check_finite(loss: float, phase: str, epoch: int) -> None:
    if not np.isfinite(loss):
        raise NumericError(f"{phase}: non-finite loss at epoch {epoch}")


# --------------------------------------------------------------- phase 1

@dataclass
class PhaseResult:
    checkpoint: Path
    losses: list[float]
    curve: Path


def save_autoencoder(path, net: UNetPP, extra: dict | None = None) -> None:
    config = {"kind": "autoencoder", "net": net.cfg.to_dict(), "hu": [HU_CENTER, HU_SCALE], **(extra or {})}
    save_checkpoint(path, config, net.param_arrays())


def load_autoencoder(path) -> tuple[UNetPP, dict]:
    config, tensors = load_checkpoint(path)
    if config.get("kind") != "autoencoder":
        raise DataError(f"{path} is not an encoder-decoder checkpoint")
    net = UNetPP(NetConfig.from_dict(config["net"]), np.random.default_rng(0))
    net.load_param_arrays(tensors)
    return net, config


def train_phase1(cfg: RunConfig, progress: Callable[[str], None] | None = None) -> PhaseResult:
    """Autoencode all training slices (A and B pooled) with deep supervision."""
    net_cfg = cfg.net()
    factor = 2 ** (net_cfg.depth - 1)
    a, b = _slices_of(load_entries(cfg.manifest, "train"), factor, cfg.crop)
    x_all = np.concatenate([a, b])
    net = UNetPP(net_cfg, substream(cfg.seed, "init"))
    opt = Adam(net.named_params(), lr=cfg.lr)
    rng_batch = substream(cfg.seed, "batching")
    rng_aug = substream(cfg.seed, "augment")
    cols = head_columns(net_cfg)
    losses = []
    for epoch in range(1, cfg.epochs1 + 1):
        tot, n = 0.0, 0
        for idx in _batches(len(x_all), cfg.batch, rng_batch):
            x = x_all[idx]
            x_skip = degrade_skips(x, cfg.skip_aug_p, cfg.skip_aug_sigma, rng_aug)
            opt.zero_grad()
            _, heads, _, cache = net.forward(x, x_skip)
            loss, grads = deep_supervision_loss([heads[c] for c in cols], x,
                                                net_cfg.supervision_weights, net_cfg.recon_loss)
            _check_finite(loss, "phase 1", epoch)
            net.backward(dict(zip(cols, grads)), cache)
            opt.step()
            tot += loss * len(idx)
            n += len(idx)
        losses.append(tot / n)
        if progress:
            progress(f"phase1 epoch {epoch}/{cfg.epochs1} loss {losses[-1]:.6g}")
    out = Path(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    ckpt, curve = out / "phase1.ltck", out / "phase1_loss.csv"
    save_autoencoder(ckpt, net, {"seed": cfg.seed})
    _write_curve(curve, losses)
    return PhaseResult(ckpt, losses, curve)


def reconstruct(net: UNetPP, slices_hu: np.ndarray, chunk: int = 16) -> np.ndarray:
    """decode(encode(x)) for (N, H, W) HU slices, in chunks to bound memory."""
    out = []
    for k in range(0, len(slices_hu), chunk):
        x = to_net(slices_hu[k:k + chunk])[..., None]
        latent, skips, _ = net.encode(x)
        out.append(from_net(net.decode(latent, skips)[..., 0]))
    return np.concatenate(out)


def reconstruction_psnr(net: UNetPP, slices_hu: np.ndarray, window=(-1000.0, 400.0)) -> float:
    """PSNR of decode(encode(x)) against x over ``window`` (values clipped to it)."""
    lo, hi = window
    rec = reconstruct(net, slices_hu)
    ref = np.clip(slices_hu.astype(np.float64), lo, hi)
    rec = np.clip(rec.astype(np.float64), lo, hi)
    mse = np.mean((rec - ref) ** 2)
    return float(10 * np.log10((hi - lo) ** 2 / mse)) if mse > 0 else float("inf")


# --------------------------------------------------------------- phase 2

class _Encoder:
    """Maps network-scaled slices to the vectors the denoiser works on."""

    def __init__(self, net: UNetPP | None):
        self.net = net

    def __call__(self, x: np.ndarray):
        if self.net is None:  # pixel-space diffusion
            return x.reshape(len(x), -1).astype(np.float64), None
        latent, skips, _ = self.net.encode(x)
        return latent.astype(np.float64), skips


def _encode_all(enc: _Encoder, x: np.ndarray, chunk: int = 32) -> np.ndarray:
    return np.concatenate([enc(x[k:k + chunk])[0] for k in range(0, len(x), chunk)])


def _check_net_matches(cfg: RunConfig, net_cfg: NetConfig) -> None:
    want = cfg.net()
    # the loss choice does not change the network, so only compare topology
    for key in ("depth", "base_channels", "latent_dim", "arch"):
        if getattr(want, key) != getattr(net_cfg, key):
            raise DataError(f"config/checkpoint mismatch on {key}: "
                            f"{getattr(want, key)} vs {getattr(net_cfg, key)}")


def train_phase2(cfg: RunConfig, phase1_ckpt=None,
                 progress: Callable[[str], None] | None = None) -> PhaseResult:
    """Fit the conditional denoiser on frozen latents (pixels for ``ddpm-only``)."""
    if cfg.method == "autoencoder":
        raise ValueError("the autoencoder method has no diffusion phase")
    if cfg.method == "ddpm-only":
        net, factor = None, 1
    else:
        if phase1_ckpt is None:
            raise DataError("phase 2 needs a phase-1 checkpoint")
        net, _ = load_autoencoder(phase1_ckpt)
        _check_net_matches(cfg, net.cfg)
        factor = 2 ** (net.cfg.depth - 1)
    a, b = _slices_of(load_entries(cfg.manifest, "train"), factor, cfg.crop)
    enc = _Encoder(net)
    z_a, z_b = _encode_all(enc, a), _encode_all(enc, b)
    scaler = ddpm.LatentScaler.fit(np.concatenate([z_a, z_b]))
    # round through float32 so training sees exactly what the checkpoint stores
    scaler = ddpm.LatentScaler(scaler.mean.astype(np.float32).astype(np.float64),
                               scaler.std.astype(np.float32).astype(np.float64))
    u_a, u_b = scaler.forward(z_a), scaler.forward(z_b)
    dim = z_a.shape[1]
    s = cfg.schedule()
    d = ddpm.Denoiser(ddpm.DenoiserConfig(dim, cfg.hidden, cfg.n_layers, cfg.temb_dim),
                      substream(cfg.seed, "init-denoiser"))
    opt = Adam(d.named_params(), lr=cfg.lr2)
    loss_cfg = ddpm.LossConfig(cfg.lambda_aux, cfg.lam)
    rng_batch = substream(cfg.seed, "batching-denoiser")
    rng_diff = substream(cfg.seed, "diffusion")
    b_imgs = b if (net is not None and cfg.lambda_aux > 0 and cfg.lam > 0) else None
    losses = []
    for epoch in range(1, cfg.epochs2 + 1):
        tot, n = 0.0, 0
        for idx in _batches(len(u_a), cfg.batch, rng_batch):
            aux = None
            if b_imgs is not None:
                aux = _aux_decoder(net, scaler, a[idx], b_imgs[idx])
            opt.zero_grad()
            terms = ddpm.train_step(d, u_a[idx], u_b[idx], s, rng_diff, loss_cfg, aux)
            _check_finite(terms["total"], "phase 2", epoch)
            opt.step()
            tot += terms["total"] * len(idx)
            n += len(idx)
        losses.append(tot / n)
        if progress:
            progress(f"phase2 epoch {epoch}/{cfg.epochs2} loss {losses[-1]:.6g}")
    out = Path(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    ckpt, curve = out / "phase2.ltck", out / "phase2_loss.csv"
    extra = {"method": cfg.method, "seed": cfg.seed}
    if net is not None:
        extra["net"] = net.cfg.to_dict()
    ddpm.save_denoiser(ckpt, d, s, scaler, extra)
    _write_curve(curve, losses)
    return PhaseResult(ckpt, losses, curve)


def _aux_decoder(net: UNetPP, scaler: ddpm.LatentScaler, a: np.ndarray, b: np.ndarray) -> ddpm.AuxDecoder:
    """Image-space term: decode the x0 estimate with A's skips and compare with B."""
    _, skips, _ = net.encode(a)

    def fwd(u):
        z = scaler.inverse(u).astype(np.float32)
        heads, cache = net.decode_all(z, skips)
        return heads[net.cfg.depth - 1], cache

    def bwd(dimg, cache):
        dz, _ = net.decode_backward({net.cfg.depth - 1: dimg.astype(np.float32)}, cache)
        net.zero_grad()  # decoder stays frozen
        return dz.astype(np.float64) * scaler.std

    return ddpm.AuxDecoder(fwd, bwd, b.astype(np.float64))


# ---------------------------------------------------------- standardise

@dataclass
class Models:
    method: str
    net: UNetPP | None = None
    denoiser: ddpm.Denoiser | None = None
    schedule: ddpm.NoiseSchedule | None = None
    scaler: ddpm.LatentScaler | None = None


def load_models(method: str, phase1_ckpt=None, phase2_ckpt=None) -> Models:
    if method not in METHODS:
        raise ValueError(f"method must be one of {METHODS}")
    m = Models(method)
    if method != "ddpm-only":
        if phase1_ckpt is None:
            raise DataError(f"method {method} needs a phase-1 checkpoint")
        m.net, _ = load_autoencoder(phase1_ckpt)
    if method != "autoencoder":
        if phase2_ckpt is None:
            raise DataError(f"method {method} needs a phase-2 checkpoint")
        m.denoiser, m.schedule, m.scaler, conf = ddpm.load_denoiser(phase2_ckpt)
        if conf.get("method", "ltdiff") != method:
            raise DataError(f"phase-2 checkpoint was trained for {conf.get('method')}, not {method}")
        if m.net is not None and conf.get("net", {}) != m.net.cfg.to_dict():
            for key in ("depth", "base_channels", "latent_dim", "arch"):
                if conf.get("net", {}).get(key) != getattr(m.net.cfg, key):
                    raise DataError("phase-1 and phase-2 checkpoints are incompatible")
    return m


def standardize(a: Volume, models: Models, start_mode: str = "truncated:100",
                rng: np.random.Generator | None = None, crop: bool = True) -> Volume:
    """Map a non-standard volume to the standard domain slice by slice.

    With center cropping the border outside the processed window keeps A's
    values, so the result always has A's dims and spacing.
    """
    rng = rng if rng is not None else np.random.default_rng(0)
    factor = 2 ** (models.net.cfg.depth - 1) if models.net is not None else 1
    sy, sx = crop_box(a.shape[1], a.shape[2], factor, crop)
    x = to_net(a.data[:, sy, sx])[..., None]
    if models.method == "ddpm-only":
        cond = models.scaler.forward(x.reshape(len(x), -1))
        u = ddpm.sample(cond, models.denoiser, models.schedule,
                        ddpm.parse_start_mode(start_mode, cond), rng)
        y = models.scaler.inverse(u).reshape(x.shape).astype(np.float32)
    else:
        latent, skips, _ = models.net.encode(x)
        if models.method == "ltdiff":
            cond = models.scaler.forward(latent)
            u = ddpm.sample(cond, models.denoiser, models.schedule,
                            ddpm.parse_start_mode(start_mode, cond), rng)
            latent = models.scaler.inverse(u).astype(np.float32)
        y = models.net.decode(latent, skips)
    out = np.array(a.data, dtype=np.float32, copy=True)
    out[:, sy, sx] = from_net(y[..., 0])
    return a.with_data(out)


# -------------------------------------------------------------- evaluate

@dataclass
class ROISpec:
    roi_id: str
    mask: ROIMask


def lesion_rois(entry: ManifestEntry, v: Volume, shrink: float = 1.0) -> list[ROISpec]:
    """Spheres at each lesion centre, radius shrunk to stay clear of the rim."""
    out = []
    for k, les in enumerate(entry.lesions):
        m = roi_from_sphere(v, les["center"], max(les["radius_vox"] - shrink, 1.0))
        out.append(ROISpec(f"pair{entry.index:04d}/lesion{k}", m))
    return out


def window_rois(entry: ManifestEntry, b: Volume, min_voxels: int = 64) -> list[ROISpec]:
    """HU-window masks computed on the standard image B."""
    out = []
    for k, w in enumerate(PAPER_WINDOWS):
        m = roi_from_window(b, w)
        if m.voxel_count >= min_voxels:
            out.append(ROISpec(f"pair{entry.index:04d}/window{k}", m))
    return out


def _extract_triplet(job):
    roi_id, mask, vols, xcfg = job
    try:
        return roi_id, [extract_all(v, ROIMask(mask), xcfg) for v in vols]
    except ValueError as exc:
        return roi_id, str(exc)


@dataclass
class EvalResult:
    features: dict[str, dict[str, FeatureVector]]  # "A"/"B"/"A'" -> roi -> features
    baseline: CCCReport
    model: CCCReport
    rel_baseline: list
    rel_model: list
    skipped: dict[str, str] = field(default_factory=dict)

    def summary(self) -> dict:
        return {
            "baseline_ccc": {c: v[0] for c, v in self.baseline.summary.items()},
            "model_ccc": {c: v[0] for c, v in self.model.summary.items()},
            "baseline_rel_err": mean_relative_error(self.rel_baseline),
            "model_rel_err": mean_relative_error(self.rel_model),
            "n_rois": len(self.features["B"]),
            "skipped": len(self.skipped),
        }


def evaluate(entries: Sequence[ManifestEntry], a_prime: dict[int, Volume], roi_policy: str = "lesion",
             xcfg: ExtractConfig = ExtractConfig(), workers: int = 1) -> EvalResult:
    """Feature-level agreement of A (baseline) and A' (model) with B.

    ROIs where any extractor fails (too small, too thin) are skipped for
    all three images and listed in ``skipped``.
    """
    jobs = []
    for e in entries:
        if e.index not in a_prime:
            raise DataError(f"no standardized volume for pair {e.index}")
        p = load_pair(e)
        ap = a_prime[e.index]
        if ap.shape != p.a.shape:
            raise DataError(f"pair {e.index}: A' shape {ap.shape} != A shape {p.a.shape}")
        if roi_policy == "lesion":
            rois = lesion_rois(e, p.b)
        elif roi_policy == "window":
            rois = window_rois(e, p.b)
        else:
            raise ValueError(f"unknown ROI policy {roi_policy!r}")
        jobs += [(r.roi_id, r.mask.mask, (p.a, p.b, ap), xcfg) for r in rois]
    if workers > 1:
        with ProcessPoolExecutor(workers) as ex:
            results = list(ex.map(_extract_triplet, jobs))  # map keeps job order
    else:
        results = [_extract_triplet(j) for j in jobs]
    feats = {"A": {}, "B": {}, "A'": {}}
    skipped = {}
    for roi_id, res in results:
        if isinstance(res, str):
            skipped[roi_id] = res
            continue
        for key, fv in zip(("A", "B", "A'"), res):
            feats[key][roi_id] = fv
    if len(feats["B"]) < 2:
        first = next(iter(skipped.items()), ("", ""))
        raise DataError(f"only {len(feats['B'])} usable ROIs; need at least 2 (e.g. {first[0]}: {first[1]})")
    return EvalResult(
        feats,
        group_ccc(feats["B"], feats["A"]),
        group_ccc(feats["B"], feats["A'"]),
        relative_error_table(feats["B"], feats["A"]),
        relative_error_table(feats["B"], feats["A'"]),
        skipped,
    )


def write_eval(res: EvalResult, out_dir) -> dict[str, str]:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    paths = {
        "features_A": out / "features_A.csv",
        "features_B": out / "features_B.csv",
        "features_Aprime": out / "features_Aprime.csv",
        "ccc_baseline": out / "ccc_baseline.csv",
        "ccc_model": out / "ccc_model.csv",
        "relerr_baseline": out / "relerr_baseline.csv",
        "relerr_model": out / "relerr_model.csv",
        "summary": out / "eval_summary.json",
    }
    for key, name in (("A", "features_A"), ("B", "features_B"), ("A'", "features_Aprime")):
        write_feature_csv(paths[name], [(roi.split("/")[0], roi, fv) for roi, fv in sorted(res.features[key].items())])
    res.baseline.to_csv(paths["ccc_baseline"])
    res.model.to_csv(paths["ccc_model"])
    write_relative_error_csv(paths["relerr_baseline"], res.rel_baseline)
    write_relative_error_csv(paths["relerr_model"], res.rel_model)
    paths["summary"].write_text(json.dumps(res.summary(), indent=2, sort_keys=True) + "\n")
    return {k: str(v) for k, v in paths.items()}


def write_run_manifest(path, cfg: RunConfig, outputs: dict) -> None:
    """Config echo, seeds and output paths of a run, as JSON."""
    doc = {"config": cfg.to_dict(), "seed": cfg.seed,
           "substreams": ["phantom", "init", "batching", "augment", "init-denoiser",
                          "batching-denoiser", "diffusion", "sampling"],
           "outputs": {k: str(v) for k, v in outputs.items()}}
    Path(path).write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")
