"""Slice rendering: grayscale underlay with a diverging relevance overlay."""

from __future__ import annotations

import numpy as np

from voxrel.explain import Heatmap
from voxrel.volume import Volume

AXES = {"x": 0, "y": 1, "z": 2}

POSITIVE_COLOR = np.array([255.0, 0.0, 0.0])
NEGATIVE_COLOR = np.array([0.0, 0.0, 255.0])


def slice_plane(data: np.ndarray, axis: str, index: int) -> np.ndarray:
    """2D plane at ``index`` along a named axis; rows are the later axis."""
    if axis not in AXES:
        raise ValueError(f"axis must be one of {sorted(AXES)}, got {axis!r}")
    ax = AXES[axis]
    if not 0 <= index < data.shape[ax]:
        raise ValueError(f"slice index {index} out of bounds for axis {axis} of size {data.shape[ax]}")
    plane = np.take(data, index, axis=ax)
    return plane.T  # (rows, cols) = (later axis, earlier axis)


def render_slice(vol: Volume, heatmap: Heatmap | None, axis: str, index: int, value_range: float = 0.03) -> bytes:
    """Render one slice as a binary PPM (P6) image.

    Relevance is clamped to [-value_range, value_range]; positive values
    blend toward red, negative toward blue, proportionally to magnitude.
    """
    if value_range <= 0:
        raise ValueError("value range must be positive")
    gray = slice_plane(vol.data.astype(np.float64), axis, index)
    lo, hi = float(vol.data.min()), float(vol.data.max())
    gray = (gray - lo) / (hi - lo) if hi > lo else np.zeros_like(gray)
    rgb = np.repeat(gray[:, :, None] * 255.0, 3, axis=2)
    if heatmap is not None:
        if heatmap.dims != vol.dims:
            raise ValueError(f"heatmap dims {heatmap.dims} do not match volume dims {vol.dims}")
        rel = slice_plane(heatmap.data.astype(np.float64), axis, index)
        rel = np.clip(rel / value_range, -1.0, 1.0)
        alpha = np.abs(rel)[:, :, None]
        color = np.where(rel[:, :, None] >= 0, POSITIVE_COLOR, NEGATIVE_COLOR)
        rgb = rgb * (1.0 - alpha) + color * alpha
    pixels = np.clip(np.rint(rgb), 0, 255).astype(np.uint8)
    h, w = pixels.shape[:2]
    return b"P6\n%d %d\n255\n" % (w, h) + pixels.tobytes()


def write_ppm(path, content: bytes) -> None:
    with open(path, "wb") as f:
        f.write(content)
