"""Dense 3D volume container and bit-exact file I/O.

A Volume is a read-only (C, D, H, W) array of uint8 or float32 values.
Everything else in the package (masks, MRI crops, probability maps)
travels through this type.

On-disk format (".rvol"):

    bytes 0..5   magic b"RVOL1\\0"
    byte  6      dtype code: 0 = uint8, 1 = float32
    byte  7      ndim, always 4
    bytes 8..23  four little-endian uint32 dims, order C, D, H, W
    rest         raw payload, little-endian, C order (C, D, H, W)

No padding, no trailing bytes. The format is host-endianness independent.
"""

from __future__ import annotations

import os
import struct
from dataclasses import dataclass

import numpy as np

MAGIC = b"RVOL1\x00"
_DTYPE_CODES = {0: np.dtype("<u1"), 1: np.dtype("<f4")}
_CODE_FOR_KIND = {"uint8": 0, "float32": 1}

# Sanity cap on total payload; a header asking for more is treated as corrupt.
_MAX_VOXELS = 1 << 33


class Volume:
    """Immutable dense grid of shape (channels, depth, height, width)."""

    __slots__ = ("data",)

    def __init__(self, data: np.ndarray):
        arr = np.asarray(data)
        if arr.ndim != 4:
            raise ValueError(f"volume data must be 4-d (C,D,H,W), got ndim={arr.ndim}")
        if any(s < 1 for s in arr.shape):
            raise ValueError(f"volume dims must all be >= 1, got {arr.shape}")
        if arr.dtype == np.uint8:
            pass
        elif arr.dtype == np.float32:
            pass
        else:
            raise ValueError(f"volume dtype must be uint8 or float32, got {arr.dtype}")
        arr = np.ascontiguousarray(arr)
        arr.flags.writeable = False
        object.__setattr__(self, "data", arr)

    def __setattr__(self, name, value):
        raise AttributeError("Volume is immutable")

    @property
    def channels(self) -> int:
        return self.data.shape[0]

    @property
    def depth(self) -> int:
        return self.data.shape[1]

    @property
    def height(self) -> int:
        return self.data.shape[2]

    @property
    def width(self) -> int:
        return self.data.shape[3]

    @property
    def shape(self) -> tuple[int, int, int, int]:
        return self.data.shape

    @property
    def spatial(self) -> tuple[int, int, int]:
        return self.data.shape[1:]

    def __eq__(self, other) -> bool:
        if not isinstance(other, Volume):
            return NotImplemented
        return (
            self.data.dtype == other.data.dtype
            and self.data.shape == other.data.shape
            and self.data.tobytes() == other.data.tobytes()
        )

    def __hash__(self):
        return hash((self.data.shape, self.data.dtype.str, self.data.tobytes()))

    def __repr__(self):
        return f"Volume(shape={self.data.shape}, dtype={self.data.dtype})"

    @staticmethod
    def zeros(shape: tuple[int, int, int, int], dtype="float32") -> "Volume":
        return Volume(np.zeros(shape, dtype=dtype))

    @staticmethod
    def from_array(arr: np.ndarray, dtype=None) -> "Volume":
        """Wrap an array, adding a channel axis to 3-d input."""
        arr = np.asarray(arr)
        if arr.ndim == 3:
            arr = arr[None]
        if dtype is not None:
            arr = arr.astype(dtype)
        return Volume(arr)


@dataclass(frozen=True)
class VoxelBox:
    """Axis-aligned box: integer origin and extent in (d, h, w) order."""

    origin: tuple[int, int, int]
    extent: tuple[int, int, int]

    def __post_init__(self):
        if any(o < 0 for o in self.origin):
            raise ValueError(f"box origin must be >= 0, got {self.origin}")
        if any(e < 1 for e in self.extent):
            raise ValueError(f"box extent must be >= 1, got {self.extent}")

    @property
    def stop(self) -> tuple[int, int, int]:
        return tuple(o + e for o, e in zip(self.origin, self.extent))

    def slices(self) -> tuple[slice, slice, slice]:
        return tuple(slice(o, o + e) for o, e in zip(self.origin, self.extent))


def write_rvol(v: Volume, path) -> None:
    """Serialize a Volume; read_rvol(path) recovers it bit-exactly."""
    code = _CODE_FOR_KIND[v.data.dtype.name]
    header = MAGIC + struct.pack("<BB", code, 4) + struct.pack("<4I", *v.data.shape)
    payload = np.ascontiguousarray(v.data, dtype=_DTYPE_CODES[code]).tobytes()
    tmp = f"{path}.tmp.{os.getpid()}"
    with open(tmp, "wb") as f:
        f.write(header)
        f.write(payload)
    os.replace(tmp, path)


def read_rvol(path) -> Volume:
    with open(path, "rb") as f:
        raw = f.read()
    if len(raw) < 24:
        raise ValueError("rvol: truncated payload (file shorter than header)")
    if raw[:6] != MAGIC:
        raise ValueError(f"rvol: bad magic {raw[:6]!r}")
    code, ndim = struct.unpack("<BB", raw[6:8])
    if code not in _DTYPE_CODES:
        raise ValueError(f"rvol: unknown dtype code {code}")
    if ndim != 4:
        raise ValueError(f"rvol: bad ndim {ndim} (expected 4)")
    dims = struct.unpack("<4I", raw[8:24])
    if any(d == 0 for d in dims):
        raise ValueError(f"rvol: dim overflow (zero dim in {dims})")
    n = 1
    for d in dims:
        n *= d
    if n > _MAX_VOXELS:
        raise ValueError(f"rvol: dim overflow ({dims} exceeds sanity cap)")
    dt = _DTYPE_CODES[code]
    expected = 24 + n * dt.itemsize
    if len(raw) < expected:
        raise ValueError(
            f"rvol: truncated payload ({len(raw) - 24} bytes, expected {n * dt.itemsize})"
        )
    if len(raw) > expected:
        raise ValueError(f"rvol: trailing bytes ({len(raw) - expected})")
    arr = np.frombuffer(raw, dtype=dt, count=n, offset=24).reshape(dims)
    # frombuffer yields native-endian view of LE data only on LE hosts
    return Volume(arr.astype(dt.newbyteorder("="), copy=False))


def center_crop(v: Volume, extent: tuple[int, int, int]) -> Volume:
    """Spatial center crop, all channels. Margins must be even per axis."""
    box = center_box(v.spatial, extent)
    idx = (slice(None),) + box.slices()
    return Volume(v.data[idx].copy())


def center_box(dims: tuple[int, int, int], extent: tuple[int, int, int]) -> VoxelBox:
    """The centered VoxelBox of `extent` inside `dims`; even margins required."""
    if len(extent) != 3:
        raise ValueError(f"extent must have 3 axes, got {extent}")
    origin = []
    for ax, (dim, ext) in enumerate(zip(dims, extent)):
        if ext < 1:
            raise ValueError(f"extent must be >= 1, got {ext} on axis {ax}")
        if ext > dim:
            raise ValueError(f"extent {ext} too large for dim {dim} on axis {ax}")
        margin = dim - ext
        if margin % 2 != 0:
            raise ValueError(f"odd margin {margin} on axis {ax} (dim {dim}, extent {ext})")
        origin.append(margin // 2)
    return VoxelBox(tuple(origin), tuple(extent))


_AXIS_INDEX = {"d": 1, "h": 2, "w": 3}


def export_slice(v: Volume, axis: str, index: int, path, normalization="minmax") -> None:
    """Write one slice of a single-channel volume as a binary PGM (P5) image.

    normalization: "minmax" maps [min, max] -> [0, 255] (constant volumes
    map to 0), or a ("fixed", lo, hi) tuple for an explicit range. Pixel
    value is floor((v - lo) * 255 / (hi - lo)), clipped to [0, 255].
    """
    if v.channels != 1:
        raise ValueError(f"export_slice requires a single-channel volume, got {v.channels}")
    if axis not in _AXIS_INDEX:
        raise ValueError(f"axis must be one of d/h/w, got {axis!r}")
    ax = _AXIS_INDEX[axis]
    if not 0 <= index < v.shape[ax]:
        raise ValueError(f"index {index} out of range for axis {axis} (size {v.shape[ax]})")
    sl = [slice(None)] * 4
    sl[ax] = index
    plane = np.asarray(v.data[tuple(sl)][0], dtype=np.float64)

    if normalization == "minmax":
        lo, hi = float(v.data.min()), float(v.data.max())
    elif isinstance(normalization, tuple) and normalization[0] == "fixed":
        _, lo, hi = normalization
        lo, hi = float(lo), float(hi)
    else:
        raise ValueError(f"unknown normalization {normalization!r}")
    if hi > lo:
        pix = np.floor((plane - lo) * 255.0 / (hi - lo))
    else:
        pix = np.zeros_like(plane)
    pix = np.clip(pix, 0, 255).astype(np.uint8)
    write_pgm(pix, path)


def write_pgm(img: np.ndarray, path) -> None:
    """Binary PGM (P5), maxval 255. img is (rows, cols) uint8."""
    img = np.ascontiguousarray(img, dtype=np.uint8)
    if img.ndim != 2:
        raise ValueError(f"pgm image must be 2-d, got shape {img.shape}")
    rows, cols = img.shape
    with open(path, "wb") as f:
        f.write(f"P5\n{cols} {rows}\n255\n".encode("ascii"))
        f.write(img.tobytes())


def read_pgm(path) -> np.ndarray:
    """Inverse of write_pgm (only the subset written by this package)."""
    with open(path, "rb") as f:
        raw = f.read()
    parts = raw.split(b"\n", 3)
    if parts[0] != b"P5":
        raise ValueError("not a binary PGM file")
    cols, rows = (int(t) for t in parts[1].split())
    if parts[2] != b"255":
        raise ValueError("unsupported PGM maxval")
    return np.frombuffer(parts[3], dtype=np.uint8, count=rows * cols).reshape(rows, cols)
