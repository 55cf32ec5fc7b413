"""Layer primitives with hand-written backward passes.

Tensors are plain numpy arrays in NHWC layout. Every ``forward`` returns
``(output, cache)`` and the matching ``backward(grad, cache)`` returns the
input gradient while accumulating parameter gradients into ``Param.grad``.
Keeping the cache outside the layer lets one layer appear several times
in a graph (shared encoder passes, re-run decoders).
"""
from __future__ import annotations

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

LEAK = 0.01


class ShapeError(ValueError):
    pass


class Param:
    __slots__ = ("data", "grad")

    def __init__(self, data: np.ndarray):
        self.data = data
        self.grad = np.zeros_like(data)

    def zero_grad(self):
        self.grad[...] = 0

    def astype(self, dtype):
        self.data = self.data.astype(dtype)
        self.grad = np.zeros_like(self.data)


def kaiming_uniform(rng: np.random.Generator, shape, fan_in: int, dtype=np.float32) -> np.ndarray:
    bound = np.sqrt(6.0 / fan_in)
    return rng.uniform(-bound, bound, size=shape).astype(dtype)


class Module:
    def named_params(self) -> dict[str, Param]:
        out = {}
        for key, val in vars(self).items():
            if isinstance(val, Param):
                out[key] = val
            elif isinstance(val, Module):
                out.update({f"{key}.{k}": p for k, p in val.named_params().items()})
            elif isinstance(val, dict):
                for sub, m in val.items():
                    if isinstance(m, Module):
                        out.update({f"{key}.{sub}.{k}": p for k, p in m.named_params().items()})
        return out

    def zero_grad(self):
        for p in self.named_params().values():
            p.zero_grad()

    def astype(self, dtype):
        for p in self.named_params().values():
            p.astype(dtype)
        return self


# ------------------------------------------------------------ convolution

def _reflect_pad1(x: np.ndarray) -> np.ndarray:
    return np.pad(x, ((0, 0), (1, 1), (1, 1), (0, 0)), mode="reflect")


def _reflect_pad1_backward(gp: np.ndarray) -> np.ndarray:
    g = gp[:, 1:-1, 1:-1].copy()
    # padded row 0 mirrors row 1, padded row H+1 mirrors row H-2
    g[:, 1, :] += gp[:, 0, 1:-1]
    g[:, -2, :] += gp[:, -1, 1:-1]
    g[:, :, 1] += gp[:, 1:-1, 0]
    g[:, :, -2] += gp[:, 1:-1, -1]
    g[:, 1, 1] += gp[:, 0, 0]
    g[:, 1, -2] += gp[:, 0, -1]
    g[:, -2, 1] += gp[:, -1, 0]
    g[:, -2, -2] += gp[:, -1, -1]
    return g


def _im2col3(xp: np.ndarray) -> np.ndarray:
    n, hp, wp, c = xp.shape
    win = sliding_window_view(xp, (3, 3), axis=(1, 2))  # n, h, w, c, 3, 3
    return np.ascontiguousarray(win.transpose(0, 1, 2, 4, 5, 3)).reshape(n * (hp - 2) * (wp - 2), 9 * c)


class Conv2d(Module):
    """3x3 stride-1 convolution with reflect padding (or 1x1 when ``k=1``)."""

    def __init__(self, cin: int, cout: int, rng: np.random.Generator, k: int = 3, dtype=np.float32):
        if k not in (1, 3):
            raise ValueError("only 1x1 and 3x3 kernels are supported")
        self.k, self.cin, self.cout = k, cin, cout
        self.w = Param(kaiming_uniform(rng, (k, k, cin, cout), k * k * cin, dtype))
        self.b = Param(np.zeros(cout, dtype=dtype))

    def _check(self, x):
        if x.ndim != 4 or x.shape[-1] != self.cin:
            raise ShapeError(f"conv expects (N, H, W, {self.cin}), got {x.shape}")
        if self.k == 3 and min(x.shape[1:3]) < 2:
            raise ShapeError(f"reflect padding needs H, W >= 2, got {x.shape}")

    def forward(self, x: np.ndarray):
        self._check(x)
        n, h, w, _ = x.shape
        if self.k == 1:
            y = x @ self.w.data[0, 0] + self.b.data
            return y, x
        cols = _im2col3(_reflect_pad1(x))
        y = cols @ self.w.data.reshape(9 * self.cin, self.cout) + self.b.data
        return y.reshape(n, h, w, self.cout), (cols, x.shape)

    def backward(self, dy: np.ndarray, cache):
        if self.k == 1:
            x = cache
            self.w.grad[0, 0] += x.reshape(-1, self.cin).T @ dy.reshape(-1, self.cout)
            self.b.grad += dy.sum(axis=(0, 1, 2))
            return dy @ self.w.data[0, 0].T
        cols, xshape = cache
        dyf = dy.reshape(-1, self.cout)
        self.w.grad += (cols.T @ dyf).reshape(self.w.data.shape)
        self.b.grad += dyf.sum(axis=0)
        # gradient w.r.t. the padded input is a full correlation with the flipped kernel
        dyz = np.pad(dy, ((0, 0), (2, 2), (2, 2), (0, 0)))
        wf = self.w.data[::-1, ::-1].transpose(0, 1, 3, 2).reshape(9 * self.cout, self.cin)
        n, h, w, _ = xshape
        dxp = (_im2col3(dyz) @ wf).reshape(n, h + 2, w + 2, self.cin)
        return _reflect_pad1_backward(dxp)


class Dense(Module):
    def __init__(self, nin: int, nout: int, rng: np.random.Generator, dtype=np.float32):
        self.nin, self.nout = nin, nout
        self.w = Param(kaiming_uniform(rng, (nin, nout), nin, dtype))
        self.b = Param(np.zeros(nout, dtype=dtype))

    def forward(self, x: np.ndarray):
        if x.ndim != 2 or x.shape[1] != self.nin:
            raise ShapeError(f"dense expects (N, {self.nin}), got {x.shape}")
        return x @ self.w.data + self.b.data, x

    def backward(self, dy: np.ndarray, x):
        self.w.grad += x.T @ dy
        self.b.grad += dy.sum(axis=0)
        return dy @ self.w.data.T


# ------------------------------------------------------- parameter-free ops

def leaky_relu(x: np.ndarray):
    pos = x > 0
    return np.where(pos, x, x * LEAK), pos


def leaky_relu_backward(dy: np.ndarray, pos: np.ndarray) -> np.ndarray:
    return np.where(pos, dy, dy * LEAK)


def downsample(x: np.ndarray) -> np.ndarray:
    """2x2 average pooling."""
    n, h, w, c = x.shape
    if h % 2 or w % 2:
        raise ShapeError(f"downsample needs even H, W, got {x.shape}")
    return x.reshape(n, h // 2, 2, w // 2, 2, c).mean(axis=(2, 4))


def downsample_backward(dy: np.ndarray) -> np.ndarray:
    return upsample(dy) * dy.dtype.type(0.25)


def upsample(x: np.ndarray) -> np.ndarray:
    """2x nearest-neighbour upsampling."""
    return x.repeat(2, axis=1).repeat(2, axis=2)


def upsample_backward(dy: np.ndarray) -> np.ndarray:
    n, h, w, c = dy.shape
    return dy.reshape(n, h // 2, 2, w // 2, 2, c).sum(axis=(2, 4))


def concat(xs: list[np.ndarray]):
    """Concatenate along channels; the cache is the list of split points."""
    base = xs[0].shape[:-1]
    for x in xs[1:]:
        if x.shape[:-1] != base:
            raise ShapeError(f"concat shape mismatch: {xs[0].shape} vs {x.shape}")
    return np.concatenate(xs, axis=-1), np.cumsum([x.shape[-1] for x in xs])[:-1]


def concat_backward(dy: np.ndarray, splits) -> list[np.ndarray]:
    return np.split(dy, splits, axis=-1)


def global_avg_pool(x: np.ndarray) -> np.ndarray:
    return x.mean(axis=(1, 2))


def global_avg_pool_backward(dy: np.ndarray, shape) -> np.ndarray:
    n, h, w, c = shape
    return np.broadcast_to((dy / (h * w))[:, None, None, :], shape).copy()
