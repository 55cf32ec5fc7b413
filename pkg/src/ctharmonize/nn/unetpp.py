"""Deeply supervised UNet++ (and plain UNet) with a 1D latent bottleneck.

Node ``(i, j)`` lives at resolution level ``i`` (``i = 0`` is full size)
and decoder column ``j``. Encoder nodes are ``X[i, 0] = H(down(X[i-1, 0]))``;
decoder nodes are ``X[i, j] = H(concat(X[i, 0..j-1], up(X[i+1, j-1])))``
with ``H`` a 3x3 convolution followed by a leaky rectifier.

The deepest encoder map is globally average pooled and projected to the
latent vector. The decoder never sees that map directly: in its place it
gets a dense expansion of the latent, broadcast over the bottleneck grid.
That makes ``decode(latent, skips)`` well defined for any latent, while the
finer encoder maps (the skips) still come from the input image.
"""
from __future__ import annotations

from dataclasses import asdict, dataclass, field

import numpy as np

from . import layers as L
from .layers import Conv2d, Dense, Module, ShapeError


@dataclass(frozen=True)
class NetConfig:
    depth: int = 4
    base_channels: int = 16
    latent_dim: int = 128
    arch: str = "unetpp"  # or "unet"
    recon_loss: str = "l2"  # or "l1"
    supervision_weights: tuple[float, ...] | None = None  # one per head, defaults to all ones

    def __post_init__(self):
        if self.depth < 2:
            raise ValueError("depth must be >= 2")
        if self.latent_dim < 1 or self.base_channels < 1:
            raise ValueError("latent_dim and base_channels must be positive")
        if self.arch not in ("unetpp", "unet"):
            raise ValueError(f"unknown arch {self.arch!r}")
        if self.recon_loss not in ("l2", "l1"):
            raise ValueError(f"unknown recon_loss {self.recon_loss!r}")
        n_heads = self.depth - 1 if self.arch == "unetpp" else 1
        w = self.supervision_weights
        if w is None:
            w = (1.0,) * n_heads
        w = tuple(float(x) for x in w)
        if len(w) != n_heads or min(w) < 0 or sum(w) <= 0:
            raise ValueError(f"need {n_heads} non-negative supervision weights with positive sum")
        object.__setattr__(self, "supervision_weights", w)

    def channels(self, level: int) -> int:
        return self.base_channels * 2 ** level

    def to_dict(self) -> dict:
        d = asdict(self)
        d["supervision_weights"] = list(self.supervision_weights)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "NetConfig":
        d = dict(d)
        if d.get("supervision_weights") is not None:
            d["supervision_weights"] = tuple(d["supervision_weights"])
        return cls(**d)


def node_list(cfg: NetConfig) -> list[tuple[int, int]]:
    """All nodes (i, j) in evaluation order, encoder first."""
    depth = cfg.depth
    nodes = [(i, 0) for i in range(depth)]
    if cfg.arch == "unetpp":
        nodes += [(i, j) for j in range(1, depth) for i in range(depth - j)]
    else:
        nodes += [(i, depth - 1 - i) for i in range(depth - 2, -1, -1)]
    return nodes


def head_columns(cfg: NetConfig) -> list[int]:
    return list(range(1, cfg.depth)) if cfg.arch == "unetpp" else [cfg.depth - 1]


def _node_inputs(cfg: NetConfig, i: int, j: int) -> list[tuple[int, int]]:
    """Same-level predecessors of decoder node (i, j); the upsampled one is (i+1, j-1)."""
    if cfg.arch == "unetpp":
        return [(i, k) for k in range(j)]
    return [(i, 0)]


@dataclass
class Skips:
    """Encoder-side feature maps X[i, 0] for i < depth - 1, plus provenance."""

    maps: list[np.ndarray]
    config: dict = field(default_factory=dict)


class UNetPP(Module):
    def __init__(self, cfg: NetConfig, rng: np.random.Generator, dtype=np.float32):
        self.cfg = cfg
        depth = cfg.depth
        self.convs: dict[str, Conv2d] = {}
        for i, j in node_list(cfg):
            if j == 0:
                cin = 1 if i == 0 else cfg.channels(i - 1)
            else:
                cin = len(_node_inputs(cfg, i, j)) * cfg.channels(i) + cfg.channels(i + 1)
            self.convs[f"{i}{j}"] = Conv2d(cin, cfg.channels(i), rng, 3, dtype)
        top = cfg.channels(depth - 1)
        self.to_latent = Dense(top, cfg.latent_dim, rng, dtype)
        self.from_latent = Dense(cfg.latent_dim, top, rng, dtype)
        self.heads: dict[str, Conv2d] = {
            str(j): Conv2d(cfg.channels(0), 1, rng, 1, dtype) for j in head_columns(cfg)}

    # -------------------------------------------------------------- encoder
    def _check_input(self, x):
        if x.ndim != 4 or x.shape[-1] != 1:
            raise ShapeError(f"expected (N, H, W, 1) input, got {x.shape}")
        f = 2 ** (self.cfg.depth - 1)
        if x.shape[1] % f or x.shape[2] % f:
            raise ShapeError(f"H and W must be divisible by {f}, got {x.shape[1:3]}")

    def _encode_maps(self, x):
        maps, caches = [], []
        h = x
        for i in range(self.cfg.depth):
            if i > 0:
                h = L.downsample(h)
            z, cc = self.convs[f"{i}0"].forward(h)
            h, ca = L.leaky_relu(z)
            maps.append(h)
            caches.append((cc, ca))
        return maps, caches

    def _encode_maps_backward(self, dmaps, caches):
        dh = None
        for i in range(self.cfg.depth - 1, -1, -1):
            g = dmaps[i] if dh is None else (dmaps[i] + dh if dmaps[i] is not None else dh)
            if g is None:
                dh = None
                continue
            cc, ca = caches[i]
            dz = L.leaky_relu_backward(g, ca)
            dh = self.convs[f"{i}0"].backward(dz, cc)
            if i > 0:
                dh = L.downsample_backward(dh)
        return dh

    def encode(self, x: np.ndarray):
        """Return (latent, skips, cache)."""
        self._check_input(x)
        maps, caches = self._encode_maps(x)
        pooled = L.global_avg_pool(maps[-1])
        latent, cd = self.to_latent.forward(pooled)
        skips = Skips(maps[:-1], self._skip_tag(x.shape))
        return latent, skips, (caches, maps[-1].shape, cd)

    def _skip_tag(self, shape):
        return {"net": self.cfg.to_dict(), "shape": list(shape)}

    # -------------------------------------------------------------- decoder
    def decode_all(self, latent: np.ndarray, skips: Skips, upto: int | None = None):
        """Evaluate decoder nodes with column <= ``upto``; return ({column: head}, cache)."""
        cfg = self.cfg
        depth = cfg.depth
        if skips.config.get("net") not in (None, cfg.to_dict()):
            raise ValueError("skips were produced by a network with a different config")
        if len(skips.maps) != depth - 1:
            raise ValueError(f"expected {depth - 1} skip maps, got {len(skips.maps)}")
        if latent.ndim != 2 or latent.shape[1] != cfg.latent_dim or latent.shape[0] != skips.maps[0].shape[0]:
            raise ShapeError(f"latent shape {latent.shape} incompatible with skips batch "
                             f"{skips.maps[0].shape[0]} and latent_dim {cfg.latent_dim}")
        upto = depth - 1 if upto is None else upto
        feats = {(i, 0): m for i, m in enumerate(skips.maps)}
        n, h, w, _ = skips.maps[-1].shape
        zb, cdense = self.from_latent.forward(latent)
        b, cb = L.leaky_relu(zb)
        bottleneck_shape = (n, h // 2, w // 2, b.shape[1])
        feats[(depth - 1, 0)] = np.broadcast_to(b[:, None, None, :], bottleneck_shape)
        caches = {}
        for i, j in node_list(cfg):
            if j == 0 or j > upto:
                continue
            ins = [feats[p] for p in _node_inputs(cfg, i, j)] + [L.upsample(feats[(i + 1, j - 1)])]
            xin, csplit = L.concat(ins)
            z, cc = self.convs[f"{i}{j}"].forward(xin)
            feats[(i, j)], ca = L.leaky_relu(z)
            caches[(i, j)] = (csplit, cc, ca)
        heads, hcaches = {}, {}
        for j in head_columns(cfg):
            if j <= upto:
                heads[j], hcaches[j] = self.heads[str(j)].forward(feats[(0, j)])
        return heads, (caches, hcaches, cdense, cb, bottleneck_shape, upto)

    def decode(self, latent: np.ndarray, skips: Skips) -> np.ndarray:
        heads, _ = self.decode_all(latent, skips)
        return heads[self.cfg.depth - 1]

    def decode_backward(self, dheads: dict[int, np.ndarray], cache):
        """Backprop head gradients; return (dlatent, dskip_maps)."""
        caches, hcaches, cdense, cb, bshape, upto = cache
        cfg = self.cfg
        depth = cfg.depth
        grads: dict[tuple[int, int], np.ndarray] = {}

        def acc(key, g):
            grads[key] = grads[key] + g if key in grads else g

        for j, g in dheads.items():
            if g is not None:
                acc((0, j), self.heads[str(j)].backward(g, hcaches[j]))
        for i, j in reversed(node_list(cfg)):
            if j == 0 or (i, j) not in caches:
                continue
            g = grads.pop((i, j), None)
            if g is None:
                continue
            csplit, cc, ca = caches[(i, j)]
            dxin = self.convs[f"{i}{j}"].backward(L.leaky_relu_backward(g, ca), cc)
            parts = L.concat_backward(dxin, csplit)
            for p, gp in zip(_node_inputs(cfg, i, j), parts[:-1]):
                acc(p, gp)
            acc((i + 1, j - 1), L.upsample_backward(parts[-1]))
        db = grads.get((depth - 1, 0))
        if db is not None:
            dzb = L.leaky_relu_backward(db.sum(axis=(1, 2)), cb)
            dlatent = self.from_latent.backward(dzb, cdense)
        else:
            dlatent = None
        dskips = [grads.get((i, 0)) for i in range(depth - 1)]
        return dlatent, dskips

    # --------------------------------------------------------- full passes
    def forward(self, x: np.ndarray, x_skip: np.ndarray | None = None, upto: int | None = None):
        """Autoencode ``x``; return (latent, heads, skips, cache).

        With ``x_skip`` the skip maps are taken from a second encoder pass
        over ``x_skip`` while the latent still comes from ``x``.
        """
        latent, skips, enc_cache = self.encode(x)
        skip_cache = None
        if x_skip is not None:
            if x_skip.shape != x.shape:
                raise ShapeError(f"x_skip shape {x_skip.shape} != x shape {x.shape}")
            _, skips, skip_cache = self.encode(x_skip)
        heads, dec_cache = self.decode_all(latent, skips, upto)
        return latent, heads, skips, (enc_cache, skip_cache, dec_cache)

    def backward(self, dheads: dict[int, np.ndarray], cache, dlatent_extra: np.ndarray | None = None):
        """Accumulate parameter gradients; return the input gradient(s)."""
        enc_cache, skip_cache, dec_cache = cache
        dlatent, dskips = self.decode_backward(dheads, dec_cache)
        if dlatent_extra is not None:
            dlatent = dlatent_extra if dlatent is None else dlatent + dlatent_extra
        caches, top_shape, cd = enc_cache
        dtop = None
        if dlatent is not None:
            dpool = self.to_latent.backward(dlatent, cd)
            dtop = L.global_avg_pool_backward(dpool, top_shape)
        if skip_cache is None:
            return self._encode_maps_backward(dskips + [dtop], caches)
        dx = self._encode_maps_backward([None] * (len(dskips)) + [dtop], caches)
        dx_skip = self._encode_maps_backward(dskips + [None], skip_cache[0])
        return dx, dx_skip

    def param_arrays(self) -> dict[str, np.ndarray]:
        return {k: p.data for k, p in self.named_params().items()}

    def load_param_arrays(self, arrays: dict[str, np.ndarray]) -> None:
        params = self.named_params()
        if set(arrays) != set(params):
            raise ValueError(f"parameter names differ: {sorted(set(arrays) ^ set(params))}")
        for k, p in params.items():
            if arrays[k].shape != p.data.shape:
                raise ShapeError(f"{k}: shape {arrays[k].shape} != {p.data.shape}")
            p.data = np.array(arrays[k], dtype=p.data.dtype)
            p.grad = np.zeros_like(p.data)
