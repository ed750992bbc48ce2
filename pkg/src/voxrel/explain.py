"""Relevance heatmaps: epsilon-rule propagation and gradient sensitivity.

Both explainers decompose the pre-sigmoid classification score. Positive
voxel relevance supports the positive (patient) class, negative opposes it.
Internals run in double precision; returned heatmaps are float32.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from voxrel.nn.layers import SigmoidOutput
from voxrel.nn.network import Network, backward_batch, forward_batch
from voxrel.volume import Mask, Volume, load_volume, save_volume


@dataclass(eq=False)
class Heatmap:
    """Signed per-voxel relevance with the dims of the explained volume."""

    dims: tuple[int, int, int]
    data: np.ndarray

    def __post_init__(self):
        self.dims = tuple(int(d) for d in self.dims)
        self.data = np.asarray(self.data, dtype=np.float32).reshape(self.dims)
        if not np.all(np.isfinite(self.data)):
            raise ValueError("heatmap contains non-finite relevance")

    def __eq__(self, other):
        return isinstance(other, Heatmap) and self.dims == other.dims and np.array_equal(self.data, other.data)


def save_heatmap(h: Heatmap, path) -> None:
    save_volume(Volume(h.dims, h.data), path)


def load_heatmap(path) -> Heatmap:
    v = load_volume(path)
    return Heatmap(v.dims, v.data)


def _eval_pass(net: Network, vol: Volume):
    if vol.dims != net.input_dims:
        raise ValueError(f"volume dims {vol.dims} do not match network input {net.input_dims}")
    net64 = net.astype(np.float64)
    x = vol.data.astype(np.float64)[None, None]
    fp = forward_batch(net64, x, train=False, want_cols=False)
    return net64, fp


def lrp(net: Network, vol: Volume, epsilon: float = 0.001) -> Heatmap:
    """Propagate the logit back to the input with the epsilon rule.

    Dense and conv layers share out relevance proportionally to x_i * w_ij
    over the stabilized pre-activation; max pooling routes winner-takes-all;
    ELU, flatten and inert dropout pass relevance through.
    """
    net64, fp = _eval_pass(net, vol)
    r = np.asarray([[fp.logit]], dtype=np.float64)
    for i in range(len(net64.layers) - 1, -1, -1):
        layer = net64.layers[i]
        if isinstance(layer, SigmoidOutput):
            continue
        r = layer.relevance(r, fp.caches[i], float(epsilon))
        if not np.all(np.isfinite(r)):
            raise ValueError(
                f"non-finite relevance while propagating through layer {i} "
                f"({layer.spec()['type']}); consider a nonzero epsilon"
            )
    return Heatmap(vol.dims, r[0, 0].astype(np.float32))


def sensitivity(net: Network, vol: Volume) -> Heatmap:
    """Voxel-wise absolute gradient of the logit (single-channel norm)."""
    net64, fp = _eval_pass(net, vol)
    g = backward_batch(net64, fp, np.asarray([1.0]), need_param_grads=False, include_l2=False)
    return Heatmap(vol.dims, np.abs(g.d_input[0, 0]).astype(np.float32))


def relevance_sum(h: Heatmap) -> float:
    """Signed total relevance over all voxels."""
    return float(h.data.astype(np.float64).sum())


def relevance_share_in_mask(h: Heatmap, m: Mask, mode: str = "positive") -> float:
    """Fraction of relevance inside the mask.

    ``positive`` counts positive relevance only (the default accounting);
    ``absolute`` uses magnitudes instead. Returns 0 for an empty mask or
    when there is nothing to share.
    """
    if h.dims != m.dims:
        raise ValueError(f"dims mismatch: heatmap {h.dims} vs mask {m.dims}")
    if mode == "positive":
        field = np.clip(h.data.astype(np.float64), 0.0, None)
    elif mode == "absolute":
        field = np.abs(h.data.astype(np.float64))
    else:
        raise ValueError(f"unknown mode {mode!r}")
    total = field.sum()
    if total <= 0.0:
        return 0.0
    return float(field[m.data == 1].sum() / total)


def average_heatmap(heatmaps: list[Heatmap]) -> Heatmap:
    """Voxel-wise arithmetic mean of equally shaped heatmaps."""
    if not heatmaps:
        raise ValueError("cannot average an empty heatmap list")
    dims = heatmaps[0].dims
    for h in heatmaps[1:]:
        if h.dims != dims:
            raise ValueError(f"dims mismatch: {h.dims} vs {dims}")
    acc = np.zeros(dims, dtype=np.float64)
    for h in heatmaps:
        acc += h.data
    return Heatmap(dims, (acc / len(heatmaps)).astype(np.float32))
