"""Dense 3D scalar volumes and binary masks.

Volumes are stored as float32 arrays indexed ``data[x, y, z]``; the first
axis is the sagittal (left-right) axis by convention. On disk they use the
VVOL container: the magic bytes ``VVOL1``, a little-endian u32 header
length, a UTF-8 JSON header ``{"dims": [nx, ny, nz], "dtype": ..., "order":
"x-fastest"}`` and the raw little-endian payload with x varying fastest.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

MAGIC = b"VVOL1"

_DTYPES = {
    "f32": np.dtype("<f4"),
    "u8": np.dtype("<u1"),
    "u16": np.dtype("<u2"),
}


@dataclass(eq=False)
class Volume:
    """A single-channel 3D scalar field, float32, indexed [x, y, z]."""

    dims: tuple[int, int, int]
    data: np.ndarray

    def __post_init__(self):
        self.dims = tuple(int(d) for d in self.dims)
        if any(d < 1 for d in self.dims):
            raise ValueError(f"volume dims must be positive, got {self.dims}")
        self.data = np.asarray(self.data, dtype=np.float32).reshape(self.dims)
        if not np.all(np.isfinite(self.data)):
            raise ValueError(f"volume contains non-finite values at voxel index {_first_nonfinite(self.data)}")

    def __eq__(self, other):
        return (
            isinstance(other, Volume)
            and self.dims == other.dims
            and np.array_equal(self.data, other.data)
        )


@dataclass(eq=False)
class Mask:
    """A binary voxel mask, uint8 values in {0, 1}, indexed [x, y, z]."""

    dims: tuple[int, int, int]
    data: np.ndarray

    def __post_init__(self):
        self.dims = tuple(int(d) for d in self.dims)
        if any(d < 1 for d in self.dims):
            raise ValueError(f"mask dims must be positive, got {self.dims}")
        self.data = np.asarray(self.data, dtype=np.uint8).reshape(self.dims)
        bad = (self.data > 1)
        if bad.any():
            raise ValueError(f"mask values must be 0 or 1 (voxel index {_first_true(bad)})")

    def __eq__(self, other):
        return (
            isinstance(other, Mask)
            and self.dims == other.dims
            and np.array_equal(self.data, other.data)
        )

    def count(self) -> int:
        return int(self.data.sum())


def _linear_index(coord, dims):
    # x-fastest linear index, matching the on-disk payload order
    x, y, z = coord
    return int(x + dims[0] * (y + dims[1] * z))


def _first_nonfinite(arr):
    flat = arr.ravel(order="F")
    return int(np.argmax(~np.isfinite(flat)))

def _first_true(mask):
    flat = mask.ravel(order="F")
    return int(np.argmax(flat))


def write_vvol(path, arr: np.ndarray, dtype_name: str) -> None:
    """Write a 3D array as a VVOL file. ``dtype_name`` is f32, u8 or u16."""
    if dtype_name not in _DTYPES:
        raise ValueError(f"unsupported VVOL dtype {dtype_name!r}")
    arr = np.asarray(arr)
    if arr.ndim != 3:
        raise ValueError(f"VVOL payload must be 3D, got shape {arr.shape}")
    header = json.dumps(
        {"dims": [int(d) for d in arr.shape], "dtype": dtype_name, "order": "x-fastest"},
        separators=(",", ":"),
    ).encode("utf-8")
    payload = arr.astype(_DTYPES[dtype_name]).ravel(order="F").tobytes()
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<I", len(header)))
        f.write(header)
        f.write(payload)


def read_vvol(path) -> tuple[np.ndarray, str]:
    """Read a VVOL file; returns (array indexed [x,y,z], dtype name)."""
    path = Path(path)
    raw = path.read_bytes()
    if raw[: len(MAGIC)] != MAGIC:
        raise ValueError(f"{path}: not a VVOL file (bad magic)")
    if len(raw) < len(MAGIC) + 4:
        raise ValueError(f"{path}: truncated header")
    (hlen,) = struct.unpack_from("<I", raw, len(MAGIC))
    hstart = len(MAGIC) + 4
    if len(raw) < hstart + hlen:
        raise ValueError(f"{path}: truncated header")
    try:
        header = json.loads(raw[hstart : hstart + hlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise ValueError(f"{path}: malformed VVOL header ({e})") from None
    try:
        dims = tuple(int(d) for d in header["dims"])
        dtype_name = header["dtype"]
    except (KeyError, TypeError, ValueError):
        raise ValueError(f"{path}: malformed VVOL header fields") from None
    if len(dims) != 3 or any(d < 1 for d in dims):
        raise ValueError(f"{path}: bad dims {dims}")
    if header.get("order") != "x-fastest":
        raise ValueError(f"{path}: unsupported voxel order {header.get('order')!r}")
    if dtype_name not in _DTYPES:
        raise ValueError(f"{path}: unsupported dtype {dtype_name!r}")
    dt = _DTYPES[dtype_name]
    n = dims[0] * dims[1] * dims[2]
    payload = raw[hstart + hlen :]
    if len(payload) != n * dt.itemsize:
        raise ValueError(
            f"{path}: payload length {len(payload)} does not match header "
            f"dims {dims} ({n * dt.itemsize} bytes expected)"
        )
    flat = np.frombuffer(payload, dtype=dt)
    if dtype_name == "f32" and not np.all(np.isfinite(flat)):
        raise ValueError(f"{path}: non-finite value at voxel index {int(np.argmax(~np.isfinite(flat)))}")
    return flat.reshape(dims, order="F").copy(), dtype_name


def load_volume(path) -> Volume:
    arr, dtype_name = read_vvol(path)
    if dtype_name != "f32":
        raise ValueError(f"{path}: expected f32 volume, found {dtype_name}")
    return Volume(arr.shape, arr)


def save_volume(v: Volume, path) -> None:
    write_vvol(path, v.data, "f32")


def load_mask(path) -> Mask:
    arr, dtype_name = read_vvol(path)
    if dtype_name != "u8":
        raise ValueError(f"{path}: expected u8 mask, found {dtype_name}")
    return Mask(arr.shape, arr)


def save_mask(m: Mask, path) -> None:
    write_vvol(path, m.data, "u8")


def minmax_scale(v: Volume) -> Volume:
    """Affinely map intensities to [0, 1]; constant volumes map to zeros."""
    lo = float(v.data.min())
    hi = float(v.data.max())
    if hi == lo:
        return Volume(v.dims, np.zeros(v.dims, dtype=np.float32))
    out = (v.data - np.float32(lo)) / (np.float32(hi) - np.float32(lo))
    return Volume(v.dims, out)


def _axis_interp_weights(n_in: int, n_out: int):
    # cell-centered mapping: output voxel i samples input coordinate
    # (i + 0.5) * n_in/n_out - 0.5, clamped to the valid range
    src = (np.arange(n_out, dtype=np.float64) + 0.5) * (n_in / n_out) - 0.5
    src = np.clip(src, 0.0, n_in - 1.0)
    i0 = np.floor(src).astype(np.intp)
    i0 = np.minimum(i0, n_in - 1)
    i1 = np.minimum(i0 + 1, n_in - 1)
    w = src - i0
    return i0, i1, w


def downsample(v: Volume, target_dims: tuple[int, int, int]) -> Volume:
    """Trilinear resampling onto a cell-centered grid of ``target_dims``."""
    target_dims = tuple(int(d) for d in target_dims)
    if any(d < 1 for d in target_dims):
        raise ValueError(f"target dims must be positive, got {target_dims}")
    if target_dims == v.dims:
        return Volume(v.dims, v.data.copy())
    out = v.data.astype(np.float64)
    # interpolate one axis at a time; each pass is a convex combination
    for axis in range(3):
        i0, i1, w = _axis_interp_weights(v.dims[axis], target_dims[axis])
        a0 = np.take(out, i0, axis=axis)
        a1 = np.take(out, i1, axis=axis)
        shape = [1, 1, 1]
        shape[axis] = len(w)
        wv = w.reshape(shape)
        out = a0 * (1.0 - wv) + a1 * wv
    return Volume(target_dims, out.astype(np.float32))


def flip_sagittal(v: Volume) -> Volume:
    """Reverse the volume along the x (sagittal) axis."""
    return Volume(v.dims, v.data[::-1, :, :].copy())


def shift_x(arr: np.ndarray, offset: int) -> np.ndarray:
    """Shift an [x,y,z] array along x by ``offset`` voxels with zero fill."""
    nx = arr.shape[0]
    if abs(offset) >= nx:
        raise ValueError(f"|offset| must be < {nx}, got {offset}")
    if offset == 0:
        return arr.copy()
    out = np.zeros_like(arr)
    if offset > 0:
        out[offset:] = arr[:-offset]
    else:
        out[:offset] = arr[-offset:]
    return out


def translate_sagittal(v: Volume, offset: int) -> Volume:
    """Shift along the sagittal axis by ``offset`` voxels, zero-filling."""
    return Volume(v.dims, shift_x(v.data, int(offset)))
