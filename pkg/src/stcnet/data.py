"""Synthetic moving-pattern video generation and NPY tensor I/O.

The generator renders filled squares bouncing around a canvas: every object
gets a random start position and velocity, positions advance linearly, and a
velocity component reflects when its bounding box hits a wall. Overlaps
compose by elementwise max. The whole dataset is a pure function of its
BlobSpec (seed included): sequence i draws from a stream derived from
(seed, i), so generation order or parallelism cannot change the data.

The NPY reader/writer speaks a fixed subset of format v1.0 (little-endian
f4/f8 and u1, C order, rank <= 5) and validates the header and payload sizes
explicitly rather than accepting whatever numpy would.
"""

from __future__ import annotations

import ast
import struct
from dataclasses import dataclass

import numpy as np

__all__ = ["BlobSpec", "SequenceBatch", "generate_moving_blobs", "save_npy", "load_npy"]


class NpyFormatError(ValueError):
    pass


@dataclass(frozen=True)
class BlobSpec:
    """Description of a synthetic bouncing-squares dataset."""

    canvas: tuple[int, int] = (16, 16)
    n_objects: int = 2
    object_size: int = 3
    speed_range: tuple[float, float] = (0.5, 1.5)
    t_total: int = 8
    seed: int = 0
    intensity: float = 1.0
    n_train: int = 64
    n_test: int = 16

    def __post_init__(self):
        h, w = self.canvas
        if self.object_size > min(h, w):
            raise ValueError(
                f"object size {self.object_size} does not fit canvas {self.canvas}")
        if self.t_total < 2:
            raise ValueError("t_total must be >= 2")
        if not 0.0 < self.intensity <= 1.0:
            raise ValueError("intensity must lie in (0, 1]")
        if self.speed_range[0] < 0 or self.speed_range[1] < self.speed_range[0]:
            raise ValueError("speed_range must be 0 <= min <= max")


@dataclass
class SequenceBatch:
    """Frames (N, T, C, H, W) in [0, 1] plus the train/test split sizes."""

    frames: np.ndarray
    n_train: int
    n_test: int

    @property
    def train(self) -> np.ndarray:
        return self.frames[: self.n_train]

    @property
    def test(self) -> np.ndarray:
        return self.frames[self.n_train: self.n_train + self.n_test]


def advance_with_rebound(pos: np.ndarray, vel: np.ndarray,
                         limits: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Linear advance with wall reflection of the offending velocity component.

    An object crossing a wall is mirrored back inside and that axis's velocity
    flips sign; speed magnitude is preserved. Repeated twice so a fast object
    overshooting past both walls in one step still lands inside.
    """
    pos = pos + vel
    vel = vel.copy()
    for _ in range(2):
        low = pos < 0.0
        pos[low] = -pos[low]
        vel[low] = -vel[low]
        high = pos > limits
        pos[high] = 2.0 * np.broadcast_to(limits, pos.shape)[high] - pos[high]
        vel[high] = -vel[high]
    return pos, vel


def _simulate_sequence(spec: BlobSpec, rng: np.random.Generator) -> np.ndarray:
    h, w = spec.canvas
    size = spec.object_size
    max_r, max_c = float(h - size), float(w - size)
    frames = np.zeros((spec.t_total, 1, h, w), dtype=np.float64)

    pos = np.stack([rng.uniform(0.0, max_r, spec.n_objects),
                    rng.uniform(0.0, max_c, spec.n_objects)], axis=1)
    speed = rng.uniform(spec.speed_range[0], spec.speed_range[1], spec.n_objects)
    angle = rng.uniform(0.0, 2.0 * np.pi, spec.n_objects)
    vel = np.stack([speed * np.sin(angle), speed * np.cos(angle)], axis=1)

    limits = np.array([max_r, max_c])
    for t in range(spec.t_total):
        for r, c in np.rint(pos).astype(int):
            patch = frames[t, 0, r:r + size, c:c + size]
            np.maximum(patch, spec.intensity, out=patch)
        pos, vel = advance_with_rebound(pos, vel, limits)
    return frames


def generate_moving_blobs(spec: BlobSpec) -> SequenceBatch:
    """Render n_train + n_test sequences of bouncing squares."""
    n = spec.n_train + spec.n_test
    frames = np.empty((n, spec.t_total, 1, *spec.canvas), dtype=np.float64)
    for i in range(n):
        rng = np.random.default_rng(np.random.SeedSequence(spec.seed, spawn_key=(i,)))
        frames[i] = _simulate_sequence(spec, rng)
    return SequenceBatch(frames=frames, n_train=spec.n_train, n_test=spec.n_test)


# ---------------------------------------------------------------------------
# NPY v1.0 subset

_MAGIC = b"\x93NUMPY"
_SUPPORTED_DESCR = {"<f8": np.dtype("<f8"), "<f4": np.dtype("<f4"), "|u1": np.dtype("u1")}


def save_npy(path, array: np.ndarray) -> None:
    """Write an array as NPY v1.0 (C order, little-endian, rank <= 5)."""
    arr = np.ascontiguousarray(array)
    if arr.ndim > 5:
        raise NpyFormatError(f"rank {arr.ndim} > 5 is not supported")
    descr = {np.dtype(np.float64): "<f8", np.dtype(np.float32): "<f4",
             np.dtype(np.uint8): "|u1"}.get(arr.dtype)
    if descr is None:
        raise NpyFormatError(f"unsupported dtype {arr.dtype}")
    header = ("{'descr': '%s', 'fortran_order': False, 'shape': %s, }"
              % (descr, repr(tuple(int(d) for d in arr.shape))))
    # Pad with spaces so magic+version+len+header is a multiple of 64 bytes.
    base = len(_MAGIC) + 2 + 2
    pad = 64 - (base + len(header) + 1) % 64
    header = header + " " * pad + "\n"
    with open(path, "wb") as fh:
        fh.write(_MAGIC)
        fh.write(bytes([1, 0]))
        fh.write(struct.pack("<H", len(header)))
        fh.write(header.encode("latin1"))
        fh.write(arr.tobytes())


def load_npy(path, scale_uint8: bool = False) -> np.ndarray:
    """Read an NPY v1.0 file written within the supported subset.

    With ``scale_uint8=True`` an 8-bit array is returned as float64 in [0, 1]
    (255 -> 1.0).
    """
    with open(path, "rb") as fh:
        head = fh.read(8)
        if len(head) < 8 or head[:6] != _MAGIC:
            raise NpyFormatError(f"{path}: not an NPY file (bad magic)")
        major, minor = head[6], head[7]
        if (major, minor) != (1, 0):
            raise NpyFormatError(f"{path}: unsupported NPY version {major}.{minor}")
        len_bytes = fh.read(2)
        if len(len_bytes) != 2:
            raise NpyFormatError(f"{path}: truncated header length")
        (hlen,) = struct.unpack("<H", len_bytes)
        header = fh.read(hlen)
        if len(header) != hlen:
            raise NpyFormatError(
                f"{path}: truncated header, expected {hlen} bytes got {len(header)}")
        try:
            meta = ast.literal_eval(header.decode("latin1"))
        except (ValueError, SyntaxError) as exc:
            raise NpyFormatError(f"{path}: malformed header dict: {exc}") from None
        if not isinstance(meta, dict) or set(meta) != {"descr", "fortran_order", "shape"}:
            raise NpyFormatError(f"{path}: header must have descr/fortran_order/shape")
        if meta["fortran_order"] is not False:
            raise NpyFormatError(f"{path}: fortran_order must be False")
        dtype = _SUPPORTED_DESCR.get(meta["descr"])
        if dtype is None:
            raise NpyFormatError(f"{path}: unsupported dtype descr {meta['descr']!r}")
        shape = tuple(meta["shape"])
        if not all(isinstance(d, int) and d >= 0 for d in shape):
            raise NpyFormatError(f"{path}: malformed shape {shape!r}")
        if len(shape) > 5:
            raise NpyFormatError(f"{path}: rank {len(shape)} > 5 is not supported")
        nbytes = int(np.prod(shape, dtype=np.int64)) * dtype.itemsize
        payload = fh.read(nbytes)
        if len(payload) != nbytes:
            raise NpyFormatError(
                f"{path}: truncated data, expected {nbytes} bytes got {len(payload)} "
                f"({nbytes - len(payload)} missing)")
        if fh.read(1):
            raise NpyFormatError(f"{path}: trailing bytes after array data")
    arr = np.frombuffer(payload, dtype=dtype).reshape(shape).copy()
    if scale_uint8 and arr.dtype == np.uint8:
        arr = arr.astype(np.float64) / 255.0
    return arr
