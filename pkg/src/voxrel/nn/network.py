"""Network assembly, Glorot initialization, forward/backward passes."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from voxrel.nn.layers import (
    Conv3D,
    Dense,
    Dropout,
    ELU,
    Flatten,
    Layer,
    MaxPool3D,
    SigmoidOutput,
    layer_from_spec,
    sigmoid,
)
from voxrel.volume import Volume


@dataclass
class Architecture:
    """Declarative network description: input grid plus ordered layer specs."""

    input_dims: tuple[int, int, int]
    layers: list[dict]
    in_channels: int = 1


def classifier_architecture(
    input_dims,
    conv_filters=(8, 16, 16, 32),
    kernel=(3, 3, 3),
    padding="same",
    pool_after=None,
    dropout_rate=0.3,
    elu_alpha=1.0,
    l2_lambda=0.01,
    l2_conv_layers=(3, 4),
) -> Architecture:
    """Conv/ELU/pool/dropout stack ending in a single sigmoid unit.

    ``pool_after`` lists 1-based conv positions followed by max pooling
    (default: every conv). ``l2_conv_layers`` lists the 1-based conv
    positions carrying the L2 penalty ``l2_lambda``.
    """
    if pool_after is None:
        pool_after = tuple(range(1, len(conv_filters) + 1))
    layers: list[dict] = []
    in_ch = 1
    for i, out_ch in enumerate(conv_filters, start=1):
        l2 = l2_lambda if i in tuple(l2_conv_layers) else 0.0
        layers.append(
            {
                "type": "conv3d",
                "in_channels": in_ch,
                "out_channels": int(out_ch),
                "kernel": list(kernel),
                "padding": padding,
                "l2": l2,
            }
        )
        layers.append({"type": "elu", "alpha": elu_alpha})
        if i in tuple(pool_after):
            layers.append({"type": "maxpool3d", "window": [2, 2, 2]})
            if dropout_rate > 0:
                layers.append({"type": "dropout", "rate": dropout_rate})
        in_ch = int(out_ch)
    # walk shapes to size the classifier head
    probe = Network(tuple(int(d) for d in input_dims), [layer_from_spec(s) for s in layers], validate=False)
    shape = probe._infer_shapes()[-1]
    flat = 1
    for d in shape:
        flat *= d
    layers.append({"type": "flatten"})
    layers.append({"type": "dense", "in_features": int(flat), "out_features": 1, "l2": 0.0})
    layers.append({"type": "sigmoid"})
    return Architecture(tuple(int(d) for d in input_dims), layers)


def paper_architecture(input_dims=(96, 114, 96), pool_after=None) -> Architecture:
    """The published four-conv stack: 64 filters of 3x3x3 per layer."""
    return classifier_architecture(input_dims, conv_filters=(64, 64, 64, 64), pool_after=pool_after)


class Network:
    """An ordered layer stack with parameters, ending in a scalar logit."""

    def __init__(self, input_dims, layers: list[Layer], in_channels=1, validate=True):
        self.input_dims = tuple(int(d) for d in input_dims)
        self.in_channels = in_channels
        self.layers = layers
        self.meta: dict = {}
        if validate:
            self._infer_shapes()

    def _infer_shapes(self):
        shapes = [(self.in_channels, *self.input_dims)]
        for i, layer in enumerate(self.layers):
            if isinstance(layer, SigmoidOutput) and i != len(self.layers) - 1:
                raise ValueError("sigmoid output must be the final layer")
            shapes.append(layer.out_shape(shapes[-1]))
        return shapes

    @property
    def specs(self) -> list[dict]:
        return [layer.spec() for layer in self.layers]

    def param_layers(self):
        return [l for l in self.layers if l.params()]

    def parameters(self) -> list[np.ndarray]:
        out = []
        for layer in self.layers:
            out.extend(layer.params())
        return out

    def l2_lambdas(self) -> list[float]:
        return [getattr(l, "l2", 0.0) for l in self.layers]

    def astype(self, dtype) -> "Network":
        net = Network(self.input_dims, [l.astype(dtype) for l in self.layers], self.in_channels, validate=False)
        net.meta = dict(self.meta)
        return net

    def set_parameters(self, arrays: list[np.ndarray]) -> None:
        params = self.parameters()
        if len(params) != len(arrays):
            raise ValueError(f"expected {len(params)} parameter arrays, got {len(arrays)}")
        for dst, src in zip(params, arrays):
            if dst.shape != src.shape:
                raise ValueError(f"parameter shape mismatch: {dst.shape} vs {src.shape}")
            dst[...] = src

    def snapshot(self) -> list[np.ndarray]:
        return [p.copy() for p in self.parameters()]


def count_params(net: Network) -> int:
    """Total learnable scalar count, summed over weight and bias arrays."""
    return int(sum(p.size for p in net.parameters()))


def build_network(arch: Architecture, seed: int) -> Network:
    """Instantiate an architecture with Glorot-uniform weights, zero biases."""
    layers = [layer_from_spec(s) for s in arch.layers]
    net = Network(arch.input_dims, layers, arch.in_channels)
    rng = np.random.default_rng(seed)
    for layer in layers:
        if isinstance(layer, Conv3D):
            k = layer.kernel[0] * layer.kernel[1] * layer.kernel[2]
            fan_in, fan_out = layer.in_channels * k, layer.out_channels * k
        elif isinstance(layer, Dense):
            fan_in, fan_out = layer.in_features, layer.out_features
        else:
            continue
        limit = np.sqrt(6.0 / (fan_in + fan_out))
        layer.weight[...] = rng.uniform(-limit, limit, size=layer.weight.shape).astype(layer.weight.dtype)
        layer.bias[...] = 0.0
    return net


def network_from_specs(input_dims, specs: list[dict], in_channels=1) -> Network:
    return Network(input_dims, [layer_from_spec(s) for s in specs], in_channels)


@dataclass
class ForwardPass:
    """Per-layer outputs and caches from one forward evaluation."""

    activations: list
    caches: list
    logits: np.ndarray  # (B,)
    probabilities: np.ndarray  # (B,)

    @property
    def logit(self) -> float:
        return float(self.logits[0])

    @property
    def probability(self) -> float:
        return float(self.probabilities[0])


def _run_layers(net: Network, x: np.ndarray, train: bool, rng, want_cols: bool) -> ForwardPass:
    acts = []
    caches = []
    for layer in net.layers:
        if isinstance(layer, SigmoidOutput):
            caches.append(None)
            acts.append(None)
            continue
        x, cache = layer.forward(x, train=train, rng=rng, want_cols=want_cols)
        acts.append(x)
        caches.append(cache)
    logits = x.reshape(x.shape[0], -1)
    if logits.shape[1] != 1:
        raise ValueError(f"network must end in a single logit, got {logits.shape[1]} outputs")
    logits = logits[:, 0]
    return ForwardPass(acts, caches, logits, sigmoid(logits).astype(logits.dtype))


def forward_batch(net: Network, x: np.ndarray, train: bool = False, rng=None, want_cols: bool = True) -> ForwardPass:
    if x.ndim != 5:
        raise ValueError(f"expected (B, C, X, Y, Z) input, got shape {x.shape}")
    expect = (net.in_channels, *net.input_dims)
    if x.shape[1:] != expect:
        raise ValueError(f"input shape {x.shape[1:]} does not match network input {expect}")
    return _run_layers(net, x, train, rng, want_cols)


def forward(net: Network, vol: Volume, mode: str = "eval", rng=None) -> ForwardPass:
    """Run one volume through the network.

    In ``train`` mode dropout is active (inverted scaling) and needs ``rng``;
    ``eval`` mode is deterministic.
    """
    if mode not in ("train", "eval"):
        raise ValueError(f"mode must be 'train' or 'eval', got {mode!r}")
    if vol.dims != net.input_dims:
        raise ValueError(f"volume dims {vol.dims} do not match network input {net.input_dims}")
    x = vol.data[None, None].astype(net.parameters()[0].dtype if net.parameters() else np.float32)
    return forward_batch(net, x, train=(mode == "train"), rng=rng)


def l2_penalty(net: Network) -> float:
    total = 0.0
    for layer in net.layers:
        lam = getattr(layer, "l2", 0.0)
        if lam:
            total += lam * float(np.sum(layer.weight.astype(np.float64) ** 2))
    return total


def bce_with_logits(logits: np.ndarray, labels: np.ndarray) -> np.ndarray:
    """Per-sample binary cross-entropy on raw logits, overflow-safe."""
    z = np.asarray(logits, dtype=np.float64)
    y = np.asarray(labels, dtype=np.float64)
    return np.logaddexp(0.0, z) - z * y


def loss(logit: float, label: int, net: Network | None = None) -> float:
    """Cross-entropy of one decision plus the network's L2 penalty."""
    value = float(bce_with_logits(np.asarray([logit]), np.asarray([label]))[0])
    if net is not None:
        value += l2_penalty(net)
    return value


@dataclass
class Gradients:
    """Loss gradients: per-parameter arrays plus the input-volume gradient."""

    by_param: list[np.ndarray]
    d_input: np.ndarray


def backward_batch(
    net: Network,
    fp: ForwardPass,
    dlogits: np.ndarray,
    need_param_grads: bool = True,
    include_l2: bool = True,
) -> Gradients:
    """Backpropagate d(loss)/d(logit) seeds through the cached pass."""
    dy = np.asarray(dlogits, dtype=fp.logits.dtype).reshape(-1, 1)
    grads_by_layer: list = [None] * len(net.layers)
    for i in range(len(net.layers) - 1, -1, -1):
        layer = net.layers[i]
        if isinstance(layer, SigmoidOutput):
            continue
        dy, grads = layer.backward(dy, fp.caches[i], need_param_grads=need_param_grads)
        grads_by_layer[i] = grads
    by_param: list[np.ndarray] = []
    if need_param_grads:
        for layer, grads in zip(net.layers, grads_by_layer):
            if not layer.params():
                continue
            dw, db = grads
            lam = getattr(layer, "l2", 0.0)
            if include_l2 and lam:
                dw = dw + 2.0 * lam * layer.weight
            by_param.extend([dw, db])
    return Gradients(by_param, dy)


def backward(net: Network, fp: ForwardPass, label: int) -> Gradients:
    """Exact gradients of ``loss`` for a single-sample forward pass."""
    if len(fp.logits) != 1:
        raise ValueError("backward expects a single-sample forward pass")
    dlogit = sigmoid(fp.logits)[0] - float(label)
    g = backward_batch(net, fp, np.asarray([dlogit]))
    g.d_input = g.d_input[0, 0]
    return g
