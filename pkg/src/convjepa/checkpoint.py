"""Binary checkpoint format.

Layout, all integers little-endian::

    b"CJEP"  u32 version=1  u64 step  u32 tensor_count
    per tensor: u32 name_len, name (UTF-8), u8 dtype (0 = float32),
                u32 ndim, u32 dims[ndim], raw float32 data

The whole file is parsed before any tensor is handed out, so a truncated or
corrupt file never yields partial state.
"""

from __future__ import annotations

import os
import struct
from collections import OrderedDict
from pathlib import Path

import numpy as np
import torch

from .errors import BadMagic, ShapeMismatch, Truncated, VersionMismatch

MAGIC = b"CJEP"
VERSION = 1
DTYPE_FLOAT32 = 0
SUFFIX = ".cjep"


def encode_tensors(step: int, tensors) -> bytes:
    chunks = [MAGIC, struct.pack("<IQI", VERSION, step, len(tensors))]
    for name, t in tensors:
        if t.dtype != torch.float32:
            raise TypeError(f"{name}: only float32 tensors can be checkpointed, got {t.dtype}")
        raw_name = name.encode("utf-8")
        chunks.append(struct.pack("<I", len(raw_name)))
        chunks.append(raw_name)
        chunks.append(struct.pack("<BI", DTYPE_FLOAT32, t.dim()))
        chunks.append(struct.pack(f"<{t.dim()}I", *t.shape))
        chunks.append(t.detach().contiguous().numpy().astype("<f4", copy=False).tobytes())
    return b"".join(chunks)


class _Reader:
    def __init__(self, data: bytes):
        self.data = data
        self.pos = 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.data):
            raise Truncated(f"checkpoint ends at byte {len(self.data)}, needed {self.pos + n}")
        out = self.data[self.pos:self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))


def decode_tensors(data: bytes) -> tuple[int, "OrderedDict[str, torch.Tensor]"]:
    reader = _Reader(data)
    if len(data) < len(MAGIC) or reader.take(len(MAGIC)) != MAGIC:
        raise BadMagic("not a checkpoint file (bad magic)")
    version, step, count = reader.unpack("<IQI")
    if version != VERSION:
        raise VersionMismatch(f"checkpoint version {version}, expected {VERSION}")
    tensors: OrderedDict[str, torch.Tensor] = OrderedDict()
    for _ in range(count):
        (name_len,) = reader.unpack("<I")
        name = reader.take(name_len).decode("utf-8")
        dtype, ndim = reader.unpack("<BI")
        if dtype != DTYPE_FLOAT32:
            raise ValueError(f"{name}: unsupported dtype code {dtype}")
        dims = reader.unpack(f"<{ndim}I")
        numel = int(np.prod(dims, dtype=np.int64)) if ndim else 1
        arr = np.frombuffer(reader.take(4 * numel), dtype="<f4").reshape(dims)
        tensors[name] = torch.from_numpy(arr.astype(np.float32))
    if reader.pos != len(data):
        raise ValueError(f"{len(data) - reader.pos} trailing bytes after the last tensor")
    return step, tensors


def save_checkpoint(state, path) -> Path:
    """Write ``state`` atomically (temp file + rename)."""
    path = Path(path)
    payload = encode_tensors(state.step, state.named_tensors())
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(payload)
    os.replace(tmp, path)
    return path


def read_checkpoint(path):
    return decode_tensors(Path(path).read_bytes())


def load_checkpoint(path, state):
    """Copy every tensor of the checkpoint at ``path`` into ``state``.

    ``state`` must be built from the same configuration; the tensor names and
    shapes have to match exactly.
    """
    step, tensors = read_checkpoint(path)
    named = OrderedDict(state.named_tensors())
    if list(named) != list(tensors):
        missing = sorted(set(named) - set(tensors))
        extra = sorted(set(tensors) - set(named))
        raise ShapeMismatch(f"checkpoint tensors do not match the model (missing {missing[:3]}, extra {extra[:3]})")
    for name, target in named.items():
        if tuple(target.shape) != tuple(tensors[name].shape):
            raise ShapeMismatch(f"{name}: checkpoint {tuple(tensors[name].shape)} vs model {tuple(target.shape)}")
    with torch.no_grad():
        for name, target in named.items():
            target.copy_(tensors[name])
    state.step = step
    return state
