"""Conditional denoising diffusion over latent vectors.

The diffused variable is the standard-image latent; the condition is the
latent of the non-standard image, fed to the noise predictor at every
step. Noise prediction uses the usual epsilon parameterisation with the
reverse-step variance fixed to beta_t.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Protocol

import numpy as np

from .nn import layers as L
from .nn.checkpoint import load_checkpoint, save_checkpoint
from .nn.layers import Dense, Module


@dataclass(frozen=True, eq=False)
class NoiseSchedule:
    T: int
    beta: np.ndarray
    alpha_bar: np.ndarray

    def to_dict(self) -> dict:
        return {"T": self.T, "beta_first": float(self.beta[0]), "beta_last": float(self.beta[-1])}


def make_schedule(T: int = 200, beta_first: float = 1e-4, beta_last: float = 0.02) -> NoiseSchedule:
    """Linear beta schedule with precomputed cumulative products."""
    if T < 1:
        raise ValueError("T must be >= 1")
    if not 0 < beta_first <= beta_last < 1:
        raise ValueError(f"need 0 < beta_first <= beta_last < 1, got {beta_first}, {beta_last}")
    beta = np.linspace(beta_first, beta_last, T) if T > 1 else np.array([beta_first])
    alpha_bar = np.cumprod(1.0 - beta)
    beta.setflags(write=False)
    alpha_bar.setflags(write=False)
    return NoiseSchedule(T, beta, alpha_bar)


def _alpha_bar_at(s: NoiseSchedule, t) -> np.ndarray:
    t = np.asarray(t)
    if np.any(t < -1) or np.any(t >= s.T):
        raise ValueError(f"timestep out of range [-1, {s.T})")
    # t = -1 is the noise-free pseudo step
    return np.where(t < 0, 1.0, s.alpha_bar[np.clip(t, 0, None)])


def forward_diffuse(z0: np.ndarray, t, eps: np.ndarray, s: NoiseSchedule) -> np.ndarray:
    """sqrt(ab_t) z0 + sqrt(1 - ab_t) eps; ``t`` may be a scalar or one step per row."""
    ab = _alpha_bar_at(s, t)
    if ab.ndim == 1:
        ab = ab[:, None]
    return np.sqrt(ab) * z0 + np.sqrt(1.0 - ab) * eps


def markov_step(z: np.ndarray, t: int, eps: np.ndarray, s: NoiseSchedule) -> np.ndarray:
    """One step of the noising chain: sqrt(1 - beta_t) z + sqrt(beta_t) eps."""
    b = s.beta[t]
    return np.sqrt(1.0 - b) * z + np.sqrt(b) * eps


def timestep_embedding(t, dim: int = 64) -> np.ndarray:
    t = np.atleast_1d(np.asarray(t, dtype=np.float64))
    half = dim // 2
    freqs = np.exp(-np.log(10000.0) * np.arange(half) / half)
    args = t[:, None] * freqs[None, :]
    return np.concatenate([np.sin(args), np.cos(args)], axis=1)


class NoisePredictor(Protocol):
    def predict(self, z_t: np.ndarray, t, cond: np.ndarray) -> np.ndarray: ...


@dataclass(frozen=True)
class DenoiserConfig:
    latent_dim: int = 128
    hidden: int = 256
    n_layers: int = 3
    temb_dim: int = 64


class Denoiser(Module):
    """Dense noise predictor eps(z_t, t, cond); inputs are concatenated."""

    def __init__(self, cfg: DenoiserConfig, rng: np.random.Generator, dtype=np.float32):
        if cfg.n_layers < 2:
            raise ValueError("denoiser needs at least 2 layers")
        self.cfg = cfg
        sizes = [2 * cfg.latent_dim + cfg.temb_dim] + [cfg.hidden] * (cfg.n_layers - 1) + [cfg.latent_dim]
        self.layers = {str(k): Dense(a, b, rng, dtype) for k, (a, b) in enumerate(zip(sizes, sizes[1:]))}

    @property
    def dtype(self):
        return self.layers["0"].w.data.dtype

    def forward(self, z_t: np.ndarray, t, cond: np.ndarray):
        d = self.cfg.latent_dim
        if z_t.ndim != 2 or z_t.shape[1] != d or cond.shape != z_t.shape:
            raise L.ShapeError(f"denoiser expects z_t and cond of shape (N, {d}), got {z_t.shape}, {cond.shape}")
        t = np.broadcast_to(np.asarray(t), (z_t.shape[0],))
        h = np.concatenate([z_t, timestep_embedding(t, self.cfg.temb_dim), cond], axis=1).astype(self.dtype)
        caches = []
        n = len(self.layers)
        for k in range(n):
            h, cd = self.layers[str(k)].forward(h)
            ca = None
            if k < n - 1:
                h, ca = L.leaky_relu(h)
            caches.append((cd, ca))
        return h, caches

    def backward(self, dy: np.ndarray, caches) -> None:
        g = dy.astype(self.dtype)
        for k in range(len(self.layers) - 1, -1, -1):
            cd, ca = caches[k]
            if ca is not None:
                g = L.leaky_relu_backward(g, ca)
            g = self.layers[str(k)].backward(g, cd)

    def predict(self, z_t: np.ndarray, t, cond: np.ndarray) -> np.ndarray:
        out, _ = self.forward(z_t, t, cond)
        return out.astype(np.float64)


# ------------------------------------------------------------------ training

@dataclass(frozen=True)
class LossConfig:
    lambda_aux: float = 0.0  # weight of the x0-estimate term; 0 disables it
    lam: float = 0.1  # image-space weight inside the auxiliary term


@dataclass
class AuxDecoder:
    """Frozen decoder hook for the image-space part of the auxiliary loss.

    ``forward(z0_hat) -> (images, cache)`` and ``backward(dimages, cache) -> dz``;
    ``target`` holds the standard images B for the batch.
    """

    forward: Callable
    backward: Callable
    target: np.ndarray


def train_step(d: Denoiser, z_a: np.ndarray, z_b: np.ndarray, s: NoiseSchedule,
               rng: np.random.Generator, loss_cfg: LossConfig = LossConfig(),
               aux: AuxDecoder | None = None) -> dict[str, float]:
    """Accumulate denoiser gradients for one batch; return the loss terms.

    Squared norms are summed over latent dimensions and averaged over the
    batch. Only the denoiser receives gradients.
    """
    z_a = np.asarray(z_a, dtype=np.float64)
    z_b = np.asarray(z_b, dtype=np.float64)
    n = z_b.shape[0]
    t = rng.integers(0, s.T, size=n)
    eps = rng.standard_normal(z_b.shape)
    z_t = forward_diffuse(z_b, t, eps, s)
    out, cache = d.forward(z_t, t, z_a)
    eps_hat = out.astype(np.float64)
    resid = eps_hat - eps
    base = float((resid ** 2).sum(axis=1).mean())
    grad = 2.0 * resid / n
    terms = {"base": base, "latent": 0.0, "image": 0.0}
    if loss_cfg.lambda_aux > 0:
        ab = s.alpha_bar[t][:, None]
        z0_hat = (z_t - np.sqrt(1 - ab) * eps_hat) / np.sqrt(ab)
        dz0 = 2.0 * (z0_hat - z_b) / n
        terms["latent"] = float(((z0_hat - z_b) ** 2).sum(axis=1).mean())
        if aux is not None and loss_cfg.lam > 0:
            img, dcache = aux.forward(z0_hat)
            diff = img.astype(np.float64) - aux.target
            per_img = diff.reshape(n, -1)
            terms["image"] = float((per_img ** 2).mean(axis=1).mean())
            dimg = 2.0 * diff / (n * per_img.shape[1])
            dz0 = dz0 + loss_cfg.lam * np.asarray(aux.backward(dimg, dcache), dtype=np.float64)
        grad = grad + loss_cfg.lambda_aux * dz0 * (-np.sqrt(1 - ab) / np.sqrt(ab))
    d.backward(grad, cache)
    terms["total"] = base + loss_cfg.lambda_aux * (terms["latent"] + loss_cfg.lam * terms["image"])
    return terms


# ------------------------------------------------------------------ sampling

def reverse_step(z_t: np.ndarray, t: int, cond: np.ndarray, d: NoisePredictor, s: NoiseSchedule,
                 rng: np.random.Generator) -> np.ndarray:
    if not 0 <= t < s.T:
        raise ValueError(f"timestep {t} out of range [0, {s.T})")
    beta = s.beta[t]
    eps_hat = np.asarray(d.predict(z_t, t, cond), dtype=np.float64)
    mu = (z_t - beta / np.sqrt(1.0 - s.alpha_bar[t]) * eps_hat) / np.sqrt(1.0 - beta)
    if t == 0:
        return mu
    return mu + np.sqrt(beta) * rng.standard_normal(z_t.shape)


@dataclass(frozen=True)
class PureNoise:
    pass


@dataclass(frozen=True, eq=False)
class TruncatedFrom:
    z: np.ndarray
    t_start: int


def sample(cond: np.ndarray, d: NoisePredictor, s: NoiseSchedule, start=PureNoise(),
           rng: np.random.Generator | None = None) -> np.ndarray:
    """Run the reverse chain to t = 0 and return the final latent(s)."""
    rng = rng if rng is not None else np.random.default_rng(0)
    cond = np.asarray(cond, dtype=np.float64)
    if isinstance(start, TruncatedFrom):
        if not 0 <= start.t_start < s.T:
            raise ValueError(f"t_start {start.t_start} out of range [0, {s.T})")
        z0 = np.broadcast_to(np.asarray(start.z, dtype=np.float64), cond.shape)
        z = forward_diffuse(z0, start.t_start, rng.standard_normal(cond.shape), s)
        t_from = start.t_start
    elif isinstance(start, PureNoise):
        z = rng.standard_normal(cond.shape)
        t_from = s.T - 1
    else:
        raise TypeError(f"unknown start mode {start!r}")
    for t in range(t_from, -1, -1):
        z = reverse_step(z, t, cond, d, s, rng)
    return z


def parse_start_mode(text: str, z: np.ndarray | None = None):
    """'pure-noise' or 'truncated:<t_start>'."""
    if text == "pure-noise":
        return PureNoise()
    if text.startswith("truncated:"):
        return TruncatedFrom(z, int(text.split(":", 1)[1]))
    raise ValueError(f"start mode must be 'pure-noise' or 'truncated:<t>', got {text!r}")


# ------------------------------------------------------------- persistence

@dataclass(frozen=True, eq=False)
class LatentScaler:
    """Per-dimension standardisation of latents before diffusion."""

    mean: np.ndarray
    std: np.ndarray

    @classmethod
    def fit(cls, z: np.ndarray, floor: float = 1e-6) -> "LatentScaler":
        z = np.asarray(z, dtype=np.float64)
        return cls(z.mean(axis=0), np.maximum(z.std(axis=0), floor))

    def forward(self, z):
        return (np.asarray(z, dtype=np.float64) - self.mean) / self.std

    def inverse(self, u):
        return np.asarray(u, dtype=np.float64) * self.std + self.mean


def save_denoiser(path, d: Denoiser, s: NoiseSchedule, scaler: LatentScaler | None = None,
                  extra: dict | None = None) -> None:
    config = {"kind": "denoiser", "denoiser": vars(d.cfg), "schedule": s.to_dict(), **(extra or {})}
    tensors = {f"denoiser.{k}": p.data for k, p in d.named_params().items()}
    if scaler is not None:
        # stored as float32, so round-trip through f32 before use
        tensors["scaler.mean"] = scaler.mean
        tensors["scaler.std"] = scaler.std
    save_checkpoint(path, config, tensors)


def load_denoiser(path):
    """Return (denoiser, schedule, scaler or None, config)."""
    config, tensors = load_checkpoint(path)
    if config.get("kind") != "denoiser":
        raise ValueError(f"{path} is not a denoiser checkpoint")
    d = Denoiser(DenoiserConfig(**config["denoiser"]), np.random.default_rng(0))
    params = d.named_params()
    for k, p in params.items():
        arr = tensors[f"denoiser.{k}"]
        if arr.shape != p.data.shape:
            raise ValueError(f"{path}: tensor {k} has shape {arr.shape}, expected {p.data.shape}")
        p.data = arr.copy()
        p.grad = np.zeros_like(p.data)
    sch = config["schedule"]
    s = make_schedule(sch["T"], sch["beta_first"], sch["beta_last"])
    scaler = None
    if "scaler.mean" in tensors:
        scaler = LatentScaler(tensors["scaler.mean"].astype(np.float64), tensors["scaler.std"].astype(np.float64))
    return d, s, scaler, config
