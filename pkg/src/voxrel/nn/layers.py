"""Layer implementations: batched forward, exact backward, relevance rules.

All spatial tensors are shaped (B, C, X, Y, Z); after flattening, (B, F).
Each layer's ``forward`` returns the output plus an opaque cache that
``backward`` and ``relevance`` consume, so layer objects stay read-only
during inference and explanation.
"""

from __future__ import annotations

import numpy as np


def stable_sign(z: np.ndarray) -> np.ndarray:
    """sign(z) with sign(0) = +1, so an epsilon stabilizer never vanishes."""
    return np.where(z >= 0, 1.0, -1.0).astype(z.dtype)


class Layer:
    """Base layer; parameterless layers inherit the no-op param methods."""

    def params(self) -> list[np.ndarray]:
        return []

    def out_shape(self, in_shape: tuple) -> tuple:
        raise NotImplementedError

    def forward(self, x, train=False, rng=None, want_cols=True):
        raise NotImplementedError

    def backward(self, dy, cache, need_param_grads=True):
        """Returns (dx, param_grads); param_grads aligns with params()."""
        raise NotImplementedError

    def relevance(self, r, cache, eps):
        raise NotImplementedError

    def spec(self) -> dict:
        raise NotImplementedError

    def astype(self, dtype):
        return self


class Conv3D(Layer):
    """3D convolution, odd cubic kernels, 'same' (zero pad) or 'valid'."""

    def __init__(self, in_channels, out_channels, kernel=(3, 3, 3), padding="same", l2=0.0, dtype=np.float32):
        kernel = tuple(int(k) for k in kernel)
        if in_channels < 1 or out_channels < 1 or any(k < 1 for k in kernel):
            raise ValueError("conv channel counts and kernel dims must be positive")
        if padding not in ("same", "valid"):
            raise ValueError(f"unknown padding mode {padding!r}")
        if padding == "same" and any(k % 2 == 0 for k in kernel):
            raise ValueError("'same' padding requires odd kernel dims")
        self.in_channels = in_channels
        self.out_channels = out_channels
        self.kernel = kernel
        self.padding = padding
        self.l2 = float(l2)
        self.weight = np.zeros((out_channels, in_channels, *kernel), dtype)
        self.bias = np.zeros(out_channels, dtype)

    def params(self):
        return [self.weight, self.bias]

    def spec(self):
        return {
            "type": "conv3d",
            "in_channels": self.in_channels,
            "out_channels": self.out_channels,
            "kernel": list(self.kernel),
            "padding": self.padding,
            "l2": self.l2,
        }

    def astype(self, dtype):
        out = Conv3D(self.in_channels, self.out_channels, self.kernel, self.padding, self.l2, dtype)
        out.weight = self.weight.astype(dtype)
        out.bias = self.bias.astype(dtype)
        return out

    def _pad_widths(self):
        if self.padding == "same":
            return tuple((k - 1) // 2 for k in self.kernel)
        return (0, 0, 0)

    def out_shape(self, in_shape):
        if len(in_shape) != 4 or in_shape[0] != self.in_channels:
            raise ValueError(f"conv3d expects ({self.in_channels}, X, Y, Z) input, got {in_shape}")
        if self.padding == "same":
            spatial = in_shape[1:]
        else:
            spatial = tuple(s - k + 1 for s, k in zip(in_shape[1:], self.kernel))
            if any(s < 1 for s in spatial):
                raise ValueError(f"conv3d kernel {self.kernel} larger than input {in_shape[1:]}")
        return (self.out_channels, *spatial)

    def _offsets(self):
        kx, ky, kz = self.kernel
        return [(a, b, c) for a in range(kx) for b in range(ky) for c in range(kz)]

    def _cols(self, xpad, out_spatial):
        # (B, Cin, k^3, X, Y, Z) built by k^3 contiguous slice copies; the
        # flat (B, Cin*k^3, N) view feeds a batched GEMM without transposes
        b = xpad.shape[0]
        ox, oy, oz = out_spatial
        k3 = len(self._offsets())
        cols = np.empty((b, self.in_channels, k3, ox, oy, oz), dtype=xpad.dtype)
        for i, (a, bb, c) in enumerate(self._offsets()):
            cols[:, :, i] = xpad[:, :, a : a + ox, bb : bb + oy, c : c + oz]
        return cols.reshape(b, self.in_channels * k3, ox * oy * oz)

    def forward(self, x, train=False, rng=None, want_cols=True):
        out_spatial = self.out_shape(x.shape[1:])[1:]
        px, py, pz = self._pad_widths()
        if self.padding == "same":
            xpad = np.pad(x, ((0, 0), (0, 0), (px, px), (py, py), (pz, pz)))
        else:
            xpad = x
        cols = self._cols(xpad, out_spatial)
        wmat = self.weight.reshape(self.out_channels, -1)
        z = np.matmul(wmat, cols) + self.bias[:, None]
        z = z.reshape(x.shape[0], self.out_channels, *out_spatial)
        cache = {
            "x": x,
            "cols": cols if want_cols else None,
            "z": z,
            "pad_shape": xpad.shape,
            "out_spatial": out_spatial,
        }
        return z, cache

    def _input_grad(self, dy, cache):
        b = dy.shape[0]
        ox, oy, oz = cache["out_spatial"]
        k3 = len(self._offsets())
        wmat = self.weight.reshape(self.out_channels, -1)
        dcols = np.matmul(wmat.T, dy.reshape(b, self.out_channels, -1))
        dcols = dcols.reshape(b, self.in_channels, k3, ox, oy, oz)
        dxpad = np.zeros(cache["pad_shape"], dtype=dy.dtype)
        for i, (a, bb, c) in enumerate(self._offsets()):
            dxpad[:, :, a : a + ox, bb : bb + oy, c : c + oz] += dcols[:, :, i]
        px, py, pz = self._pad_widths()
        if self.padding == "same":
            sx, sy, sz = cache["x"].shape[2:]
            return dxpad[:, :, px : px + sx, py : py + sy, pz : pz + sz]
        return dxpad

    def backward(self, dy, cache, need_param_grads=True):
        grads = None
        if need_param_grads:
            if cache["cols"] is None:
                raise ValueError("forward pass did not retain columns for parameter gradients")
            b = dy.shape[0]
            dymat = dy.reshape(b, self.out_channels, -1)
            dw = np.matmul(dymat, cache["cols"].swapaxes(1, 2)).sum(axis=0)
            dw = dw.reshape(self.weight.shape)
            db = dymat.sum(axis=(0, 2))
            grads = [dw, db]
        return self._input_grad(dy, cache), grads

    def relevance(self, r, cache, eps):
        # epsilon rule: share out each output's relevance over x_i * w_ij,
        # stabilizing the denominator z_j away from zero sign-consistently
        z = cache["z"]
        s = r / (z + eps * stable_sign(z))
        return cache["x"] * self._input_grad(s, cache)


class ELU(Layer):
    def __init__(self, alpha=1.0):
        if alpha <= 0:
            raise ValueError("ELU alpha must be positive")
        self.alpha = float(alpha)

    def spec(self):
        return {"type": "elu", "alpha": self.alpha}

    def out_shape(self, in_shape):
        return in_shape

    def forward(self, x, train=False, rng=None, want_cols=True):
        neg = x <= 0
        y = x.copy()
        y[neg] = self.alpha * np.expm1(x[neg])
        return y, {"neg": neg, "y": y}

    def backward(self, dy, cache, need_param_grads=True):
        # d/dx ELU = 1 for x>0, alpha*exp(x) = y + alpha otherwise
        out = dy.copy()
        neg = cache["neg"]
        out[neg] = dy[neg] * (cache["y"][neg] + self.alpha)
        return out, None

    def relevance(self, r, cache, eps):
        return r


class MaxPool3D(Layer):
    """Non-overlapping max pooling; stride equals the window."""

    def __init__(self, window=(2, 2, 2)):
        window = tuple(int(w) for w in window)
        if any(w < 1 for w in window):
            raise ValueError("pool window dims must be positive")
        self.window = window

    def spec(self):
        return {"type": "maxpool3d", "window": list(self.window)}

    def out_shape(self, in_shape):
        c, x, y, z = in_shape
        wx, wy, wz = self.window
        out = (x // wx, y // wy, z // wz)
        if any(o < 1 for o in out):
            raise ValueError(f"pool window {self.window} larger than input {in_shape[1:]}")
        return (c, *out)

    def _corners(self):
        # (dz, dy, dx) enumeration: ties resolve to the lowest x-fastest
        # linear index because earlier corners win strict comparisons
        wx, wy, wz = self.window
        return [(dx, dy, dz) for dz in range(wz) for dy in range(wy) for dx in range(wx)]

    def forward(self, x, train=False, rng=None, want_cols=True):
        wx, wy, wz = self.window
        ox, oy, oz = (x.shape[2] // wx, x.shape[3] // wy, x.shape[4] // wz)
        xc = x[:, :, : ox * wx, : oy * wy, : oz * wz]
        best = None
        idx = None
        for k, (dx, dy, dz) in enumerate(self._corners()):
            v = xc[:, :, dx::wx, dy::wy, dz::wz]
            if best is None:
                best = v.copy()
                idx = np.zeros(best.shape, dtype=np.uint8)
            else:
                better = v > best
                best[better] = v[better]
                idx[better] = k
        return best, {"idx": idx, "in_shape": x.shape}

    def _scatter(self, dy, cache):
        wx, wy, wz = self.window
        ox, oy, oz = dy.shape[2:]
        out = np.zeros(cache["in_shape"], dtype=dy.dtype)
        oc = out[:, :, : ox * wx, : oy * wy, : oz * wz]
        idx = cache["idx"]
        for k, (dx, dy_, dz) in enumerate(self._corners()):
            sel = idx == k
            oc[:, :, dx::wx, dy_::wy, dz::wz][sel] = dy[sel]
        return out

    def backward(self, dy, cache, need_param_grads=True):
        return self._scatter(dy, cache), None

    def relevance(self, r, cache, eps):
        # winner takes all: the argmax voxel receives the full share
        return self._scatter(r, cache)


class Dropout(Layer):
    def __init__(self, rate=0.3):
        if not 0.0 <= rate < 1.0:
            raise ValueError("dropout rate must be in [0, 1)")
        self.rate = float(rate)

    def spec(self):
        return {"type": "dropout", "rate": self.rate}

    def out_shape(self, in_shape):
        return in_shape

    def forward(self, x, train=False, rng=None, want_cols=True):
        if not train or self.rate == 0.0:
            return x, {"mask": None}
        if rng is None:
            raise ValueError("train-mode dropout needs an rng")
        draw_dtype = np.float32 if x.dtype == np.float32 else np.float64
        keep = rng.random(x.shape, dtype=draw_dtype) >= self.rate
        # inverted scaling folded into the kept mask
        mask = keep.astype(x.dtype) * np.asarray(1.0 / (1.0 - self.rate), dtype=x.dtype)
        return x * mask, {"mask": mask}

    def backward(self, dy, cache, need_param_grads=True):
        if cache["mask"] is None:
            return dy, None
        return dy * cache["mask"], None

    def relevance(self, r, cache, eps):
        if cache["mask"] is not None:
            raise ValueError("relevance propagation requires an eval-mode forward pass")
        return r


class Flatten(Layer):
    def spec(self):
        return {"type": "flatten"}

    def out_shape(self, in_shape):
        n = 1
        for d in in_shape:
            n *= d
        return (n,)

    def forward(self, x, train=False, rng=None, want_cols=True):
        return x.reshape(x.shape[0], -1), {"in_shape": x.shape}

    def backward(self, dy, cache, need_param_grads=True):
        return dy.reshape(cache["in_shape"]), None

    def relevance(self, r, cache, eps):
        return r.reshape(cache["in_shape"])


class Dense(Layer):
    def __init__(self, in_features, out_features, l2=0.0, dtype=np.float32):
        if in_features < 1 or out_features < 1:
            raise ValueError("dense feature counts must be positive")
        self.in_features = in_features
        self.out_features = out_features
        self.l2 = float(l2)
        self.weight = np.zeros((out_features, in_features), dtype)
        self.bias = np.zeros(out_features, dtype)

    def params(self):
        return [self.weight, self.bias]

    def spec(self):
        return {
            "type": "dense",
            "in_features": self.in_features,
            "out_features": self.out_features,
            "l2": self.l2,
        }

    def astype(self, dtype):
        out = Dense(self.in_features, self.out_features, self.l2, dtype)
        out.weight = self.weight.astype(dtype)
        out.bias = self.bias.astype(dtype)
        return out

    def out_shape(self, in_shape):
        if len(in_shape) != 1 or in_shape[0] != self.in_features:
            raise ValueError(f"dense expects ({self.in_features},) input, got {in_shape}")
        return (self.out_features,)

    def forward(self, x, train=False, rng=None, want_cols=True):
        z = x @ self.weight.T + self.bias
        return z, {"x": x, "z": z}

    def backward(self, dy, cache, need_param_grads=True):
        grads = None
        if need_param_grads:
            grads = [dy.T @ cache["x"], dy.sum(axis=0)]
        return dy @ self.weight, grads

    def relevance(self, r, cache, eps):
        z = cache["z"]
        s = r / (z + eps * stable_sign(z))
        return cache["x"] * (s @ self.weight)


class SigmoidOutput(Layer):
    """Terminal marker: the logistic map from logit to probability.

    The loss, backward pass and relevance seed all work on the pre-sigmoid
    logit, so this layer is skipped by those passes.
    """

    def spec(self):
        return {"type": "sigmoid"}

    def out_shape(self, in_shape):
        if in_shape != (1,):
            raise ValueError(f"sigmoid output expects a single logit, got {in_shape}")
        return in_shape


def sigmoid(z):
    z = np.asarray(z, dtype=np.float64)
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


LAYER_TYPES = {
    "conv3d": Conv3D,
    "elu": ELU,
    "maxpool3d": MaxPool3D,
    "dropout": Dropout,
    "flatten": Flatten,
    "dense": Dense,
    "sigmoid": SigmoidOutput,
}


def layer_from_spec(spec: dict) -> Layer:
    kind = spec.get("type")
    if kind == "conv3d":
        return Conv3D(
            spec["in_channels"],
            spec["out_channels"],
            tuple(spec.get("kernel", (3, 3, 3))),
            spec.get("padding", "same"),
            spec.get("l2", 0.0),
        )
    if kind == "elu":
        return ELU(spec.get("alpha", 1.0))
    if kind == "maxpool3d":
        return MaxPool3D(tuple(spec.get("window", (2, 2, 2))))
    if kind == "dropout":
        return Dropout(spec.get("rate", 0.3))
    if kind == "flatten":
        return Flatten()
    if kind == "dense":
        return Dense(spec["in_features"], spec["out_features"], spec.get("l2", 0.0))
    if kind == "sigmoid":
        return SigmoidOutput()
    raise ValueError(f"unknown layer type {kind!r}")
