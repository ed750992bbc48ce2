import numpy as np
import pytest

from voxrel.explain import Heatmap
from voxrel.render import render_slice, slice_plane
from voxrel.volume import Volume


def gray_volume(dims=(4, 5, 6)):
    rng = np.random.default_rng(2)
    return Volume(dims, rng.random(dims, dtype=np.float32))


def parse_ppm(content):
    assert content.startswith(b"P6\n")
    header, rest = content.split(b"255\n", 1)
    dims = header.split(b"\n")[1].split()
    w, h = int(dims[0]), int(dims[1])
    pixels = np.frombuffer(rest, np.uint8).reshape(h, w, 3)
    return pixels


def test_zero_heatmap_renders_pure_grayscale():
    vol = gray_volume()
    h = Heatmap(vol.dims, np.zeros(vol.dims, np.float32))
    pixels = parse_ppm(render_slice(vol, h, "z", 2))
    assert (pixels[:, :, 0] == pixels[:, :, 1]).all()
    assert (pixels[:, :, 1] == pixels[:, :, 2]).all()


def test_no_heatmap_same_as_zero_heatmap():
    vol = gray_volume()
    h = Heatmap(vol.dims, np.zeros(vol.dims, np.float32))
    assert render_slice(vol, None, "y", 1) == render_slice(vol, h, "y", 1)


def test_symmetric_relevance_gives_symmetric_red_blue():
    dims = (2, 1, 1)
    vol = Volume(dims, np.full(dims, 0.5, np.float32))
    heat = Heatmap(dims, np.array([0.02, -0.02], np.float32).reshape(dims))
    pixels = parse_ppm(render_slice(vol, heat, "z", 0, value_range=0.03))
    pos, neg = pixels[0, 0], pixels[0, 1]
    assert pos[0] == neg[2]  # red of positive equals blue of negative
    assert pos[1] == neg[1]
    assert pos[2] == neg[0]
    assert pos[0] > pos[2]  # positive leans red
    assert neg[2] > neg[0]  # negative leans blue


def test_overlay_clamps_to_range():
    dims = (1, 1, 1)
    vol = Volume(dims, np.zeros(dims, np.float32))
    heat = Heatmap(dims, np.full(dims, 10.0, np.float32))
    pixels = parse_ppm(render_slice(vol, heat, "x", 0, value_range=0.03))
    assert tuple(pixels[0, 0]) == (255, 0, 0)


def test_out_of_range_slice_rejected():
    vol = gray_volume()
    with pytest.raises(ValueError, match="out of bounds"):
        render_slice(vol, None, "z", 6)
    with pytest.raises(ValueError, match="axis"):
        render_slice(vol, None, "w", 0)


def test_slice_plane_orientation():
    data = np.arange(24, dtype=np.float32).reshape((2, 3, 4), order="F")
    plane = slice_plane(data, "z", 1)
    # (rows, cols) = (y, x)
    assert plane.shape == (3, 2)
    assert plane[0, 0] == data[0, 0, 1]
    assert plane[2, 1] == data[1, 2, 1]


def test_render_deterministic():
    vol = gray_volume()
    rng = np.random.default_rng(3)
    heat = Heatmap(vol.dims, (rng.random(vol.dims, dtype=np.float32) - 0.5) * 0.05)
    assert render_slice(vol, heat, "x", 2) == render_slice(vol, heat, "x", 2)
