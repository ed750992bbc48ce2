"""VNET model files: JSON header plus raw little-endian f32 parameter blobs."""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

from voxrel.nn.network import Network, network_from_specs

MAGIC = b"VNET1"


def save_model(net: Network, path, history=None, seed: int | None = None) -> None:
    """Write architecture, training summary and parameters; round-trips bit-exact."""
    header = {
        "architecture": net.specs,
        "input_dims": list(net.input_dims),
        "in_channels": net.in_channels,
        "l2": net.l2_lambdas(),
        "history": history.summary() if history is not None else None,
        "seed": seed,
    }
    blob = json.dumps(header, separators=(",", ":"), sort_keys=True).encode("utf-8")
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<I", len(blob)))
        f.write(blob)
        for layer in net.layers:
            for arr in layer.params():
                f.write(np.ascontiguousarray(arr, dtype="<f4").tobytes())


def load_model(path) -> Network:
    """Rebuild a network from a VNET file; header lands in ``net.meta``."""
    path = Path(path)
    raw = path.read_bytes()
    if raw[: len(MAGIC)] != MAGIC:
        raise ValueError(f"{path}: not a VNET file (bad magic)")
    if len(raw) < len(MAGIC) + 4:
        raise ValueError(f"{path}: truncated header")
    (hlen,) = struct.unpack_from("<I", raw, len(MAGIC))
    hstart = len(MAGIC) + 4
    if len(raw) < hstart + hlen:
        raise ValueError(f"{path}: truncated header")
    try:
        header = json.loads(raw[hstart : hstart + hlen].decode("utf-8"))
        specs = header["architecture"]
        input_dims = tuple(int(d) for d in header["input_dims"])
        in_channels = int(header.get("in_channels", 1))
    except (KeyError, TypeError, ValueError, json.JSONDecodeError) as e:
        raise ValueError(f"{path}: malformed VNET header ({e})") from None
    net = network_from_specs(input_dims, specs, in_channels)
    params = net.parameters()
    expected = sum(p.size for p in params) * 4
    payload = raw[hstart + hlen :]
    if len(payload) != expected:
        raise ValueError(
            f"{path}: parameter blob is {len(payload)} bytes, header implies {expected}"
        )
    offset = 0
    for p in params:
        nbytes = p.size * 4
        arr = np.frombuffer(payload, dtype="<f4", count=p.size, offset=offset)
        p[...] = arr.reshape(p.shape)
        offset += nbytes
    net.meta = header
    return net
