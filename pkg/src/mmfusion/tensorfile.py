"""Binary tensor container used across the repo.

Single-tensor files ("MMFT"): magic, format version (u32 LE), dtype
code (u32 LE; 1 = float32, 2 = float64), rank (u32 LE), one u64 LE
extent per axis, then the raw row-major little-endian values. The
round-trip is bit-exact.

Named-tensor containers ("MMCK", used for checkpoints): magic, version
(u32 LE), a 32-byte configuration digest, entry count (u32 LE), then
per entry a u32 name length, the UTF-8 name, and an embedded MMFT
record.
"""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

from .errors import InputError

TENSOR_MAGIC = b"MMFT"
CONTAINER_MAGIC = b"MMCK"
FORMAT_VERSION = 1

_CODE_FOR_DTYPE = {np.dtype(np.float32): 1, np.dtype(np.float64): 2}
_DTYPE_FOR_CODE = {1: np.dtype("<f4"), 2: np.dtype("<f8")}
_MAX_RANK = 32


def write_tensor(fh, arr: np.ndarray) -> None:
    arr = np.asarray(arr)
    code = _CODE_FOR_DTYPE.get(arr.dtype.newbyteorder("="))
    if code is None:
        raise InputError(f"unsupported tensor dtype {arr.dtype}")
    fh.write(TENSOR_MAGIC)
    fh.write(struct.pack("<III", FORMAT_VERSION, code, arr.ndim))
    fh.write(struct.pack(f"<{arr.ndim}Q", *arr.shape))
    fh.write(np.ascontiguousarray(arr, dtype=_DTYPE_FOR_CODE[code]).tobytes())


def _read_exact(fh, n: int, what: str) -> bytes:
    buf = fh.read(n)
    if len(buf) != n:
        raise InputError(f"truncated tensor file while reading {what}")
    return buf


def read_tensor(fh) -> np.ndarray:
    if _read_exact(fh, 4, "magic") != TENSOR_MAGIC:
        raise InputError("not a tensor file (bad magic)")
    version, code, rank = struct.unpack("<III", _read_exact(fh, 12, "header"))
    if version != FORMAT_VERSION:
        raise InputError(f"unsupported tensor format version {version}")
    if code not in _DTYPE_FOR_CODE:
        raise InputError(f"unknown dtype code {code}")
    if rank > _MAX_RANK:
        raise InputError(f"implausible tensor rank {rank}")
    shape = struct.unpack(f"<{rank}Q", _read_exact(fh, 8 * rank, "extents")) if rank else ()
    dtype = _DTYPE_FOR_CODE[code]
    count = int(np.prod(shape)) if rank else 1
    data = _read_exact(fh, count * dtype.itemsize, "payload")
    return np.frombuffer(data, dtype=dtype).reshape(shape).copy()


def save_tensor(path, arr: np.ndarray) -> None:
    with open(path, "wb") as fh:
        write_tensor(fh, arr)


def load_tensor(path) -> np.ndarray:
    path = Path(path)
    if not path.is_file():
        raise InputError(f"tensor file not found: {path}")
    with open(path, "rb") as fh:
        arr = read_tensor(fh)
        if fh.read(1):
            raise InputError(f"trailing bytes in tensor file: {path}")
    return arr


def peek_tensor_header(path) -> tuple[np.dtype, tuple[int, ...]]:
    """Validate the header only; cheap existence-and-parses check."""
    path = Path(path)
    if not path.is_file():
        raise InputError(f"tensor file not found: {path}")
    with open(path, "rb") as fh:
        if _read_exact(fh, 4, "magic") != TENSOR_MAGIC:
            raise InputError(f"not a tensor file: {path}")
        version, code, rank = struct.unpack("<III", _read_exact(fh, 12, "header"))
        if version != FORMAT_VERSION or code not in _DTYPE_FOR_CODE or rank > _MAX_RANK:
            raise InputError(f"malformed tensor header: {path}")
        shape = struct.unpack(f"<{rank}Q", _read_exact(fh, 8 * rank, "extents")) if rank else ()
    return _DTYPE_FOR_CODE[code], tuple(int(s) for s in shape)


def save_named_tensors(path, digest: bytes, items: dict[str, np.ndarray]) -> None:
    if len(digest) != 32:
        raise InputError("container digest must be 32 bytes")
    with open(path, "wb") as fh:
        fh.write(CONTAINER_MAGIC)
        fh.write(struct.pack("<I", FORMAT_VERSION))
        fh.write(digest)
        fh.write(struct.pack("<I", len(items)))
        for name, arr in items.items():
            encoded = name.encode("utf-8")
            fh.write(struct.pack("<I", len(encoded)))
            fh.write(encoded)
            write_tensor(fh, arr)


def load_named_tensors(path) -> tuple[bytes, dict[str, np.ndarray]]:
    path = Path(path)
    if not path.is_file():
        raise InputError(f"checkpoint file not found: {path}")
    with open(path, "rb") as fh:
        if _read_exact(fh, 4, "magic") != CONTAINER_MAGIC:
            raise InputError(f"not a checkpoint container: {path}")
        (version,) = struct.unpack("<I", _read_exact(fh, 4, "version"))
        if version != FORMAT_VERSION:
            raise InputError(f"unsupported container version {version}")
        digest = _read_exact(fh, 32, "digest")
        (count,) = struct.unpack("<I", _read_exact(fh, 4, "entry count"))
        items: dict[str, np.ndarray] = {}
        for _ in range(count):
            (name_len,) = struct.unpack("<I", _read_exact(fh, 4, "name length"))
            name = _read_exact(fh, name_len, "name").decode("utf-8")
            items[name] = read_tensor(fh)
        if fh.read(1):
            raise InputError(f"trailing bytes in checkpoint container: {path}")
    return digest, items
