"""Shared test utilities: random micro-nets and independent oracles."""

import numpy as np

from voxrel.nn.network import Architecture, Network, build_network, forward, forward_batch, loss
from voxrel.volume import Volume


def random_micro_net(rng, bias_free=False, dtype=np.float64, allow_dropout=False):
    """A small random conv/pool/dense stack on an input of at most 8x8x8."""
    dims = tuple(int(d) for d in rng.integers(4, 9, size=3))
    specs = []
    in_ch = 1
    spatial = dims
    n_conv = int(rng.integers(1, 3))
    for _ in range(n_conv):
        out_ch = int(rng.integers(2, 4))
        padding = "same" if (rng.random() < 0.7 or min(spatial) < 4) else "valid"
        specs.append(
            {
                "type": "conv3d",
                "in_channels": in_ch,
                "out_channels": out_ch,
                "kernel": [3, 3, 3],
                "padding": padding,
                "l2": float(rng.choice([0.0, 0.01])),
            }
        )
        if padding == "valid":
            spatial = tuple(s - 2 for s in spatial)
        in_ch = out_ch
        specs.append({"type": "elu", "alpha": 1.0})
        if rng.random() < 0.6 and min(spatial) >= 2:
            specs.append({"type": "maxpool3d", "window": [2, 2, 2]})
            spatial = tuple(s // 2 for s in spatial)
        if allow_dropout and rng.random() < 0.3:
            specs.append({"type": "dropout", "rate": 0.3})
    specs.append({"type": "flatten"})
    flat = in_ch * spatial[0] * spatial[1] * spatial[2]
    if rng.random() < 0.5:
        hidden = int(rng.integers(2, 5))
        specs.append({"type": "dense", "in_features": flat, "out_features": hidden, "l2": 0.0})
        specs.append({"type": "elu", "alpha": 1.0})
        flat = hidden
    specs.append({"type": "dense", "in_features": flat, "out_features": 1, "l2": 0.0})
    specs.append({"type": "sigmoid"})

    net = build_network(Architecture(dims, specs), seed=int(rng.integers(0, 2**31)))
    if not bias_free:
        for layer in net.layers:
            if layer.params():
                layer.bias[...] = rng.normal(scale=0.05, size=layer.bias.shape).astype(layer.bias.dtype)
    net = net.astype(dtype)
    vol = Volume(dims, rng.normal(scale=1.0, size=dims).astype(np.float32))
    return net, vol


def loss_of(net, vol, label):
    return loss(forward(net, vol).logit, label, net)


def rel_err(a, b, abs_floor=1e-6):
    denom = max(abs(b), abs_floor)
    return abs(a - b) / denom if abs(b) > abs_floor else abs(a - b)


def fd_param_gradients(net, vol, label, h=1e-5):
    """Central finite differences of the loss for every parameter entry."""
    grads = []
    for p in net.parameters():
        g = np.zeros_like(p, dtype=np.float64)
        flat = p.reshape(-1)
        gf = g.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            lp = loss_of(net, vol, label)
            flat[i] = orig - h
            lm = loss_of(net, vol, label)
            flat[i] = orig
            gf[i] = (lp - lm) / (2 * h)
        grads.append(g)
    return grads


def _batch_loss(net, x64, label):
    fp = forward_batch(net, x64[None, None])
    return loss(fp.logit, label, net)


def fd_input_gradient(net, vol, label, h=1e-5):
    # double-precision perturbations, bypassing the float32 volume container
    data = vol.data.astype(np.float64)
    g = np.zeros(vol.dims, dtype=np.float64)
    it = np.nditer(g, flags=["multi_index"])
    for _ in it:
        ix = it.multi_index
        orig = data[ix]
        data[ix] = orig + h
        lp = _batch_loss(net, data, label)
        data[ix] = orig - h
        lm = _batch_loss(net, data, label)
        data[ix] = orig
        g[ix] = (lp - lm) / (2 * h)
    return g


def fd_logit_gradient(net, vol, h=1e-5):
    data = vol.data.astype(np.float64)
    g = np.zeros(vol.dims, dtype=np.float64)
    it = np.nditer(g, flags=["multi_index"])
    for _ in it:
        ix = it.multi_index
        orig = data[ix]
        data[ix] = orig + h
        lp = forward_batch(net, data[None, None]).logit
        data[ix] = orig - h
        lm = forward_batch(net, data[None, None]).logit
        data[ix] = orig
        g[ix] = (lp - lm) / (2 * h)
    return g


def assert_grads_close(analytic, numeric, rtol=1e-4, atol=1e-6):
    for a, n in zip(analytic, numeric):
        a = np.asarray(a, dtype=np.float64)
        n = np.asarray(n, dtype=np.float64)
        denom = np.maximum(np.abs(n), atol)
        err = np.abs(a - n) / denom
        # absolute floor: tiny gradients compare absolutely
        close = (np.abs(a - n) <= atol) | (err <= rtol)
        assert close.all(), f"max rel err {err.max()}, max abs err {np.abs(a - n).max()}"


def random_two_layer_dense(rng, n_in, n_hidden):
    """Bias-free dense->dense net on a flat input, weights away from zero."""
    dims = (n_in, 1, 1)
    specs = [
        {"type": "flatten"},
        {"type": "dense", "in_features": n_in, "out_features": n_hidden, "l2": 0.0},
        {"type": "dense", "in_features": n_hidden, "out_features": 1, "l2": 0.0},
        {"type": "sigmoid"},
    ]
    net = build_network(Architecture(dims, specs), seed=int(rng.integers(0, 2**31)))
    net = net.astype(np.float64)
    for layer in net.layers:
        if layer.params():
            w = rng.uniform(0.4, 1.5, size=layer.weight.shape) * rng.choice([-1.0, 1.0], size=layer.weight.shape)
            layer.weight[...] = w
            layer.bias[...] = 0.0
    x = rng.uniform(0.4, 1.5, size=n_in) * rng.choice([-1.0, 1.0], size=n_in)
    vol = Volume(dims, x.astype(np.float32).reshape(dims))
    return net, vol


def path_sum_lrp(net, vol):
    """Direct nested-sum evaluation of the epsilon-zero relevance rule
    for a bias-free two-layer dense network: each input/hidden/output path
    contributes x_i w_ij / (sum_i x_i w_ij) of its layer's relevance.
    """
    dense = [l for l in net.layers if l.spec()["type"] == "dense"]
    assert len(dense) == 2
    w1 = dense[0].weight  # (H, I)
    w2 = dense[1].weight  # (1, H)
    x = vol.data.astype(np.float64).reshape(-1)
    h = w1 @ x
    logit = float((w2 @ h)[0])
    n_in, n_hidden = len(x), len(h)
    r_hidden = np.zeros(n_hidden)
    for j in range(n_hidden):
        denom = sum(h[k] * w2[0, k] for k in range(n_hidden))
        r_hidden[j] = (h[j] * w2[0, j] / denom) * logit
    r_input = np.zeros(n_in)
    for i in range(n_in):
        total = 0.0
        for j in range(n_hidden):
            denom = sum(x[k] * w1[j, k] for k in range(n_in))
            total += (x[i] * w1[j, i] / denom) * r_hidden[j]
        r_input[i] = total
    return r_input, logit
