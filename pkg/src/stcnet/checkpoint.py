"""Single-file binary checkpoint of named parameter tensors.

Layout (all integers little-endian):

    magic   8 bytes   b"STCNET01" (version is part of the magic)
    count   uint32    number of tensors
    then per tensor, in order:
        name_len  uint16
        name      name_len bytes, UTF-8
        dtype     uint8   0 = float64, 1 = float32
        ndim      uint8
        dims      ndim x uint32
        data      row-major little-endian raw values

The format is deliberately dumb so it stays stable across runs and readable
from anything; loading validates every length and fails loudly on truncation.
"""

from __future__ import annotations

import struct

import numpy as np

from .autodiff import Tensor

__all__ = ["MAGIC", "save_checkpoint", "load_checkpoint", "load_into"]

MAGIC = b"STCNET01"
_DTYPE_CODES = {np.dtype(np.float64): 0, np.dtype(np.float32): 1}
_CODE_DTYPES = {0: np.dtype("<f8"), 1: np.dtype("<f4")}


class CheckpointError(ValueError):
    pass


def save_checkpoint(path, tensors: dict[str, Tensor | np.ndarray]) -> None:
    """Write named tensors; insertion order is preserved."""
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<I", len(tensors)))
        for name, t in tensors.items():
            arr = t.data if isinstance(t, Tensor) else np.asarray(t)
            code = _DTYPE_CODES.get(arr.dtype)
            if code is None:
                raise CheckpointError(f"tensor {name!r} has unsupported dtype {arr.dtype}")
            if arr.ndim > 255:
                raise CheckpointError(f"tensor {name!r} has too many dimensions")
            raw_name = name.encode("utf-8")
            fh.write(struct.pack("<H", len(raw_name)))
            fh.write(raw_name)
            fh.write(struct.pack("<BB", code, arr.ndim))
            fh.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
            fh.write(np.ascontiguousarray(arr, dtype=arr.dtype.newbyteorder("<")).tobytes())


def _read_exact(fh, n: int, what: str) -> bytes:
    buf = fh.read(n)
    if len(buf) != n:
        raise CheckpointError(
            f"truncated checkpoint: expected {n} bytes for {what}, got {len(buf)}")
    return buf


def load_checkpoint(path) -> dict[str, np.ndarray]:
    """Read a checkpoint back into a name -> array dict (insertion order)."""
    out: dict[str, np.ndarray] = {}
    with open(path, "rb") as fh:
        magic = _read_exact(fh, len(MAGIC), "magic")
        if magic != MAGIC:
            raise CheckpointError(f"bad checkpoint magic {magic!r}")
        (count,) = struct.unpack("<I", _read_exact(fh, 4, "tensor count"))
        for i in range(count):
            (name_len,) = struct.unpack("<H", _read_exact(fh, 2, "name length"))
            name = _read_exact(fh, name_len, "name").decode("utf-8")
            code, ndim = struct.unpack("<BB", _read_exact(fh, 2, "dtype/ndim"))
            dtype = _CODE_DTYPES.get(code)
            if dtype is None:
                raise CheckpointError(f"tensor {name!r}: unknown dtype code {code}")
            shape = struct.unpack(f"<{ndim}I", _read_exact(fh, 4 * ndim, "shape"))
            nbytes = int(np.prod(shape, dtype=np.int64)) * dtype.itemsize
            data = _read_exact(fh, nbytes, f"data of {name!r}")
            out[name] = np.frombuffer(data, dtype=dtype).reshape(shape).copy()
    return out


def load_into(params: dict[str, Tensor], loaded: dict[str, np.ndarray]) -> None:
    """Copy loaded arrays into an existing parameter map, validating shapes."""
    missing = set(params) - set(loaded)
    extra = set(loaded) - set(params)
    if missing or extra:
        raise CheckpointError(
            f"checkpoint/model mismatch: missing {sorted(missing)}, extra {sorted(extra)}")
    for name, tensor in params.items():
        arr = loaded[name]
        if tuple(arr.shape) != tensor.shape:
            raise CheckpointError(
                f"tensor {name!r}: checkpoint shape {arr.shape} != model shape {tensor.shape}")
        tensor.data = arr.astype(tensor.dtype, copy=True)
