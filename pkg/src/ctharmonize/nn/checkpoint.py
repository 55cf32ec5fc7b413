"""LTCK checkpoint files.

Layout (little-endian): magic ``LTCK``, u16 version, u32 config length,
UTF-8 JSON config, u32 tensor count, then per tensor: u16 name length,
UTF-8 name, u8 ndim, ndim x u32 dims, float32 payload.
"""
from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

MAGIC = b"LTCK"
VERSION = 1


class CheckpointFormatError(ValueError):
    pass


class CheckpointMagicError(CheckpointFormatError):
    pass


class CheckpointVersionError(CheckpointFormatError):
    pass


class CheckpointTruncatedError(CheckpointFormatError):
    pass


def save_checkpoint(path, config: dict, tensors: dict[str, np.ndarray]) -> None:
    cfg = json.dumps(config, sort_keys=True).encode("utf-8")
    parts = [MAGIC, struct.pack("<HI", VERSION, len(cfg)), cfg, struct.pack("<I", len(tensors))]
    for name in sorted(tensors):
        arr = np.asarray(tensors[name], dtype="<f4", order="C")
        if not np.all(np.isfinite(arr)):
            raise CheckpointFormatError(f"tensor {name} has non-finite values")
        raw_name = name.encode("utf-8")
        parts.append(struct.pack("<HB", len(raw_name), arr.ndim) + raw_name)
        parts.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        parts.append(arr.tobytes())
    Path(path).write_bytes(b"".join(parts))


class _Reader:
    def __init__(self, raw: bytes, path):
        self.raw, self.pos, self.path = raw, 0, path

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.raw):
            raise CheckpointTruncatedError(f"{self.path}: unexpected end of file at byte {self.pos}")
        out = self.raw[self.pos:self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str):
        s = struct.Struct(fmt)
        return s.unpack(self.take(s.size))


def load_checkpoint(path) -> tuple[dict, dict[str, np.ndarray]]:
    r = _Reader(Path(path).read_bytes(), path)
    if r.raw[:4] != MAGIC:
        raise CheckpointMagicError(f"{path}: not an LTCK checkpoint")
    r.take(4)
    version, cfg_len = r.unpack("<HI")
    if version != VERSION:
        raise CheckpointVersionError(f"{path}: version {version}, expected {VERSION}")
    try:
        config = json.loads(r.take(cfg_len).decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointFormatError(f"{path}: corrupt config block") from exc
    (count,) = r.unpack("<I")
    tensors = {}
    for _ in range(count):
        name_len, ndim = r.unpack("<HB")
        name = r.take(name_len).decode("utf-8")
        shape = r.unpack(f"<{ndim}I")
        n = int(np.prod(shape, dtype=np.int64))
        tensors[name] = np.frombuffer(r.take(4 * n), dtype="<f4").reshape(shape).astype(np.float32)
    if r.pos != len(r.raw):
        raise CheckpointFormatError(f"{path}: {len(r.raw) - r.pos} trailing bytes")
    return config, tensors
