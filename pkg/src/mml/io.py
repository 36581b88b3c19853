"""Binary tensor container shared by datasets, flow caches and checkpoints.

Layout (all little-endian)::

    magic      8 bytes   e.g. b"MMLCKPT\\0"
    version    u32
    count      u32
    entries    count x (name_len u32, name utf-8, rank u32, dims u32[rank], f32 data)
"""
from __future__ import annotations

import hashlib
import io
import os
import struct
from pathlib import Path

import numpy as np

VERSION = 1
MAGIC_CKPT = b"MMLCKPT\0"
MAGIC_DATA = b"MMLDATA\0"
MAGIC_FLOW = b"MMLFLOW\0"


class ContainerError(ValueError):
    pass


def _encode(tensors: dict[str, np.ndarray], magic: bytes) -> bytes:
    if len(magic) != 8:
        raise ContainerError("magic must be 8 bytes")
    buf = io.BytesIO()
    buf.write(magic)
    buf.write(struct.pack("<II", VERSION, len(tensors)))
    for name, arr in tensors.items():
        arr = np.asarray(arr)
        if not np.all(np.isfinite(arr)):
            raise ContainerError(f"tensor {name!r} has non-finite values")
        raw = name.encode("utf-8")
        buf.write(struct.pack("<I", len(raw)))
        buf.write(raw)
        buf.write(struct.pack("<I", arr.ndim))
        buf.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
        buf.write(np.ascontiguousarray(arr, dtype="<f4").tobytes())
    return buf.getvalue()


def encode_tensors(tensors: dict[str, np.ndarray], magic: bytes = MAGIC_CKPT) -> bytes:
    return _encode(tensors, magic)


def decode_tensors(data: bytes, magic: bytes | None = None) -> dict[str, np.ndarray]:
    if len(data) < 16:
        raise ContainerError("truncated container header")
    if magic is not None and data[:8] != magic:
        raise ContainerError(f"bad magic {data[:8]!r}, expected {magic!r}")
    version, count = struct.unpack_from("<II", data, 8)
    if version != VERSION:
        raise ContainerError(f"unsupported container version {version}")
    off = 16
    out: dict[str, np.ndarray] = {}
    try:
        for _ in range(count):
            (nlen,) = struct.unpack_from("<I", data, off)
            off += 4
            name = data[off:off + nlen].decode("utf-8")
            off += nlen
            (rank,) = struct.unpack_from("<I", data, off)
            off += 4
            dims = struct.unpack_from(f"<{rank}I", data, off)
            off += 4 * rank
            size = int(np.prod(dims, dtype=np.int64))
            if off + 4 * size > len(data):
                raise ContainerError(f"truncated container: tensor {name!r} lacks data")
            arr = np.frombuffer(data, dtype="<f4", count=size, offset=off)
            off += 4 * size
            if name in out:
                raise ContainerError(f"duplicate tensor name {name!r}")
            out[name] = arr.reshape(dims).astype(np.float32)
    except struct.error as exc:
        raise ContainerError(f"truncated container: {exc}") from None
    if off != len(data):
        raise ContainerError("trailing bytes after last entry")
    return out


def write_tensors(path, tensors: dict[str, np.ndarray], magic: bytes = MAGIC_CKPT) -> str:
    """Write atomically (temp file + rename) and return the sha256 of the bytes."""
    data = _encode(tensors, magic)
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(f".{path.name}.{os.getpid()}.tmp")
    tmp.write_bytes(data)
    os.replace(tmp, path)
    return hashlib.sha256(data).hexdigest()


def read_tensors(path, magic: bytes | None = None) -> dict[str, np.ndarray]:
    return decode_tensors(Path(path).read_bytes(), magic)


def tensor_hash(tensors: dict[str, np.ndarray], magic: bytes = MAGIC_CKPT) -> str:
    return hashlib.sha256(_encode(tensors, magic)).hexdigest()


def file_hash(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()
