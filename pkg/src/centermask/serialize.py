"""Binary tensor blobs and checkpoint files.

Tensor blob (little-endian)::

    b"CMTN" | u8 dtype code | u8 ndim | ndim x u32 dims | raw data

Checkpoint::

    b"CMCKPT" | u16 format version | u32 header length | UTF-8 JSON header
    | repeated (u16 name length | name | tensor blob)
"""

from __future__ import annotations

import io
import json
import struct
from pathlib import Path
from typing import BinaryIO, Mapping

import numpy as np

TENSOR_MAGIC = b"CMTN"
CKPT_MAGIC = b"CMCKPT"
CKPT_VERSION = 1

_DTYPES = {1: np.dtype("<f4"), 2: np.dtype("<f8"), 3: np.dtype("u1"), 4: np.dtype("<i8")}


class SerializationError(ValueError):
    pass


class CheckpointVersionError(SerializationError):
    pass


def _code_for(dtype: np.dtype) -> int:
    dt = np.dtype(dtype)
    for code, known in _DTYPES.items():
        if dt.kind == known.kind and dt.itemsize == known.itemsize:
            return code
    raise SerializationError(f"unsupported dtype {dt}")


def write_tensor(f: BinaryIO, arr: np.ndarray) -> None:
    arr = np.asarray(arr)
    code = _code_for(arr.dtype)
    f.write(TENSOR_MAGIC)
    f.write(struct.pack("<BB", code, arr.ndim))
    f.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
    f.write(np.ascontiguousarray(arr, dtype=_DTYPES[code]).tobytes())


def _read_exact(f: BinaryIO, n: int) -> bytes:
    buf = f.read(n)
    if len(buf) != n:
        raise SerializationError(f"truncated stream: wanted {n} bytes, got {len(buf)}")
    return buf


def read_tensor(f: BinaryIO) -> np.ndarray:
    magic = _read_exact(f, 4)
    if magic != TENSOR_MAGIC:
        raise SerializationError(f"bad tensor magic {magic!r}")
    code, ndim = struct.unpack("<BB", _read_exact(f, 2))
    if code not in _DTYPES:
        raise SerializationError(f"unknown dtype code {code}")
    dims = struct.unpack(f"<{ndim}I", _read_exact(f, 4 * ndim))
    dt = _DTYPES[code]
    count = int(np.prod(dims)) if ndim else 1
    data = np.frombuffer(_read_exact(f, count * dt.itemsize), dtype=dt)
    return data.reshape(dims).astype(dt.newbyteorder("="), copy=True)


def tensor_to_bytes(arr: np.ndarray) -> bytes:
    buf = io.BytesIO()
    write_tensor(buf, arr)
    return buf.getvalue()


def tensor_from_bytes(raw: bytes) -> np.ndarray:
    return read_tensor(io.BytesIO(raw))


def save_checkpoint(path, header: Mapping, tensors: Mapping[str, np.ndarray]) -> None:
    """Write atomically: a crash mid-write leaves any previous file intact."""
    path = Path(path)
    meta = dict(header)
    meta["tensors"] = list(tensors)
    blob = json.dumps(meta, sort_keys=True).encode()
    tmp = path.with_suffix(path.suffix + ".tmp")
    with open(tmp, "wb") as f:
        f.write(CKPT_MAGIC)
        f.write(struct.pack("<HI", CKPT_VERSION, len(blob)))
        f.write(blob)
        for name, arr in tensors.items():
            raw = name.encode()
            f.write(struct.pack("<H", len(raw)))
            f.write(raw)
            write_tensor(f, arr)
    tmp.replace(path)


def load_checkpoint(path) -> tuple[dict, dict[str, np.ndarray]]:
    with open(path, "rb") as f:
        magic = f.read(len(CKPT_MAGIC))
        if magic != CKPT_MAGIC:
            raise CheckpointVersionError(f"{path}: not a checkpoint (magic {magic!r})")
        version, hlen = struct.unpack("<HI", _read_exact(f, 6))
        if version != CKPT_VERSION:
            raise CheckpointVersionError(f"{path}: checkpoint format {version}, expected {CKPT_VERSION}")
        header = json.loads(_read_exact(f, hlen).decode())
        tensors: dict[str, np.ndarray] = {}
        for _ in header.get("tensors", []):
            (nlen,) = struct.unpack("<H", _read_exact(f, 2))
            name = _read_exact(f, nlen).decode()
            tensors[name] = read_tensor(f)
    return header, tensors
