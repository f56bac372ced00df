"""Self-describing binary checkpoint format.

Layout (all integers unsigned 32-bit little-endian)::

    magic      8 bytes  b"RTLBCKPT"
    version    u32      currently 1
    cfg_len    u32      length of the config block
    cfg        bytes    UTF-8 JSON of ModelConfig (sorted keys)
    count      u32      number of tensors
    repeated count times:
        name_len u32, name bytes (UTF-8), rank u32, dims u32 x rank,
        data     float32 little-endian, row-major

Nothing may follow the last tensor.
"""

from __future__ import annotations

import hashlib
import json
import os
import struct
from pathlib import Path

import numpy as np

from .errors import CorruptCheckpointError, InvalidInputError
from .model import ModelConfig, ModelParams, param_shapes

MAGIC = b"RTLBCKPT"
VERSION = 1
_U32 = struct.Struct("<I")


def encode_checkpoint(params: ModelParams) -> bytes:
    cfg_block = json.dumps(params.config.to_dict(), sort_keys=True).encode("utf-8")
    parts = [MAGIC, _U32.pack(VERSION), _U32.pack(len(cfg_block)), cfg_block, _U32.pack(len(params.names()))]
    for name, tensor in params.items():
        raw = name.encode("utf-8")
        parts.append(_U32.pack(len(raw)) + raw + _U32.pack(tensor.ndim))
        parts.extend(_U32.pack(d) for d in tensor.shape)
        parts.append(np.ascontiguousarray(tensor, dtype="<f4").tobytes())
    return b"".join(parts)


def save_checkpoint(params: ModelParams, path) -> str:
    """Write ``params`` to ``path`` atomically; returns the file's SHA-256."""
    if params.dtype != np.float32:
        raise InvalidInputError(f"checkpoints store float32 tensors, got {params.dtype}")
    blob = encode_checkpoint(params)
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(blob)
    os.replace(tmp, path)
    return hashlib.sha256(blob).hexdigest()


class _Reader:
    def __init__(self, blob: bytes):
        self.blob = blob
        self.pos = 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.blob):
            raise CorruptCheckpointError(f"truncated checkpoint at byte {self.pos} (wanted {n} more)")
        out = self.blob[self.pos:self.pos + n]
        self.pos += n
        return out

    def u32(self) -> int:
        return _U32.unpack(self.take(4))[0]


def decode_checkpoint(blob: bytes) -> ModelParams:
    r = _Reader(blob)
    if r.take(len(MAGIC)) != MAGIC:
        raise CorruptCheckpointError("bad magic")
    version = r.u32()
    if version != VERSION:
        raise CorruptCheckpointError(f"unsupported checkpoint version {version}")
    try:
        cfg = ModelConfig.from_dict(json.loads(r.take(r.u32()).decode("utf-8")))
    except (ValueError, TypeError) as exc:
        raise CorruptCheckpointError(f"bad config block: {exc}") from exc
    expected = param_shapes(cfg)
    count = r.u32()
    if count != len(expected):
        raise CorruptCheckpointError(f"header lists {count} tensors, config implies {len(expected)}")
    tensors = {}
    for _ in range(count):
        try:
            name = r.take(r.u32()).decode("utf-8")
        except UnicodeDecodeError as exc:
            raise CorruptCheckpointError("bad tensor name") from exc
        rank = r.u32()
        dims = tuple(r.u32() for _ in range(rank))
        if name not in expected or name in tensors:
            raise CorruptCheckpointError(f"unexpected or duplicate tensor {name!r}")
        if dims != expected[name]:
            raise CorruptCheckpointError(f"{name}: header shape {dims} != config shape {expected[name]}")
        n = int(np.prod(dims, dtype=np.int64))
        data = np.frombuffer(r.take(4 * n), dtype="<f4").reshape(dims)
        tensors[name] = data.astype(np.float32)
    if r.pos != len(blob):
        raise CorruptCheckpointError(f"{len(blob) - r.pos} trailing bytes after last tensor")
    return ModelParams(cfg, tensors)


def load_checkpoint(path) -> tuple[ModelParams, ModelConfig]:
    params = decode_checkpoint(Path(path).read_bytes())
    return params, params.config


def file_sha256(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()
