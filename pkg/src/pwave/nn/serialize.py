"""Flat weight container.

Layout (little-endian)::

    b"PWNN"  u32 version  u32 meta_len  meta (UTF-8 JSON)
    u32 count
    count x [u16 name_len, name, u8 ndim, ndim x u32 dim, u64 offset]
    float64 data, offsets counted in elements from the start of the data block
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np
import torch

MAGIC = b"PWNN"
VERSION = 1


class WeightFileError(ValueError):
    pass


def dumps_weights(tensors: dict[str, torch.Tensor | np.ndarray], meta: dict | None = None) -> bytes:
    meta_bytes = json.dumps(meta or {}, sort_keys=True).encode()
    head = [MAGIC, struct.pack("<II", VERSION, len(meta_bytes)), meta_bytes,
            struct.pack("<I", len(tensors))]
    chunks = []
    offset = 0
    for name, t in tensors.items():
        arr = t.detach().cpu().numpy() if isinstance(t, torch.Tensor) else np.asarray(t)
        arr = np.asarray(arr, dtype="<f8", order="C")  # keeps 0-d shapes
        nb = name.encode()
        head.append(struct.pack("<H", len(nb)) + nb + struct.pack("<B", arr.ndim))
        head.append(struct.pack(f"<{arr.ndim}I", *arr.shape) + struct.pack("<Q", offset))
        chunks.append(arr.tobytes())
        offset += arr.size
    return b"".join(head + chunks)


def loads_weights(buf: bytes) -> tuple[dict[str, torch.Tensor], dict]:
    if buf[:4] != MAGIC:
        raise WeightFileError("not a PWNN weight file")
    try:
        version, meta_len = struct.unpack_from("<II", buf, 4)
        if version != VERSION:
            raise WeightFileError(f"unsupported PWNN version {version}")
        pos = 12
        meta = json.loads(buf[pos:pos + meta_len].decode())
        pos += meta_len
        (count,) = struct.unpack_from("<I", buf, pos)
        pos += 4
        entries = []
        for _ in range(count):
            (nlen,) = struct.unpack_from("<H", buf, pos)
            name = buf[pos + 2:pos + 2 + nlen].decode()
            pos += 2 + nlen
            (ndim,) = struct.unpack_from("<B", buf, pos)
            shape = struct.unpack_from(f"<{ndim}I", buf, pos + 1)
            (offset,) = struct.unpack_from("<Q", buf, pos + 1 + 4 * ndim)
            pos += 1 + 4 * ndim + 8
            entries.append((name, shape, offset))
    except (struct.error, UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise WeightFileError(f"corrupt PWNN header: {exc}") from exc
    if (len(buf) - pos) % 8:
        raise WeightFileError("tensor data is truncated")
    data = np.frombuffer(buf, dtype="<f8", offset=pos) if len(buf) > pos else np.zeros(0)
    out = {}
    for name, shape, offset in entries:
        n = int(np.prod(shape)) if shape else 1
        if offset + n > data.size:
            raise WeightFileError(f"tensor {name} runs past end of file")
        out[name] = torch.from_numpy(data[offset:offset + n].reshape(shape).copy())
    return out, meta


def save_weights(path, tensors, meta=None):
    Path(path).write_bytes(dumps_weights(tensors, meta))


def load_weights(path):
    return loads_weights(Path(path).read_bytes())
