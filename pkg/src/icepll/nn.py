"""A small convolutional classifier with hand-written forward/backward passes.

Tensors are float64 numpy arrays laid out NCHW. Parameters live in a flat
``{name: array}`` dict on :class:`Network` so the optimizer and the
checkpoint writer can walk them without knowing about layers.
"""

from __future__ import annotations

import hashlib
import io
import json
import struct
from dataclasses import dataclass, asdict, field
from pathlib import Path
from typing import Union

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .labels import N_CLASSES


class ShapeMismatch(ValueError):
    pass


class StaleCache(ValueError):
    pass


class CheckpointError(ValueError):
    pass


# -- layer specs ---------------------------------------------------------------


@dataclass(frozen=True)
class Conv2d:
    kernel_size: int
    in_channels: int
    out_channels: int
    stride: int = 1


@dataclass(frozen=True)
class Relu:
    pass


@dataclass(frozen=True)
class MaxPool:
    size: int = 2


@dataclass(frozen=True)
class GlobalAvgPool:
    pass


@dataclass(frozen=True)
class Dense:
    in_dim: int
    out_dim: int


@dataclass(frozen=True)
class Dropout:
    rate: float = 0.25

    def __post_init__(self):
        if not 0.0 <= self.rate < 1.0:
            raise ShapeMismatch(f"dropout rate must be in [0, 1), got {self.rate}")


LayerSpec = Union[Conv2d, Relu, MaxPool, GlobalAvgPool, Dense, Dropout]
_LAYER_TYPES = {cls.__name__: cls for cls in (Conv2d, Relu, MaxPool, GlobalAvgPool, Dense, Dropout)}


def default_spec(dropout: float = 0.25) -> list:
    """Two conv blocks, global pooling, then a 64-64 fully connected head."""
    return [
        Conv2d(3, 3, 8),
        Relu(),
        MaxPool(2),
        Conv2d(3, 8, 16),
        Relu(),
        GlobalAvgPool(),
        Dense(16, 64),
        Relu(),
        Dropout(dropout),
        Dense(64, 64),
        Relu(),
        Dropout(dropout),
        Dense(64, N_CLASSES),
    ]


def spec_to_dicts(spec) -> list[dict]:
    return [{"type": type(layer).__name__, **asdict(layer)} for layer in spec]


def spec_from_dicts(items) -> list:
    out = []
    for item in items:
        item = dict(item)
        try:
            cls = _LAYER_TYPES[item.pop("type")]
        except KeyError as exc:
            raise CheckpointError(f"unknown layer type {exc}") from None
        out.append(cls(**item))
    return out


# -- network -------------------------------------------------------------------


@dataclass
class Network:
    spec: list
    params: dict = field(default_factory=dict)

    def param_names(self) -> list[str]:
        return list(self.params)

    def checksum(self) -> str:
        h = hashlib.sha256()
        for name, arr in self.params.items():
            h.update(name.encode())
            h.update(np.ascontiguousarray(arr, dtype="<f8").tobytes())
        return h.hexdigest()

    def copy(self) -> "Network":
        return Network(list(self.spec), {k: v.copy() for k, v in self.params.items()})

    @property
    def n_params(self) -> int:
        return sum(a.size for a in self.params.values())


def _check_chain(spec) -> None:
    channels = None  # feature count flowing between layers
    spatial = True
    for i, layer in enumerate(spec):
        if isinstance(layer, Conv2d):
            if not spatial:
                raise ShapeMismatch(f"layer {i}: Conv2d after spatial dims were pooled away")
            if channels is not None and layer.in_channels != channels:
                raise ShapeMismatch(f"layer {i}: Conv2d expects {layer.in_channels} channels, gets {channels}")
            if layer.kernel_size < 1 or layer.stride < 1:
                raise ShapeMismatch(f"layer {i}: bad kernel/stride")
            channels = layer.out_channels
        elif isinstance(layer, MaxPool):
            if not spatial or layer.size < 1:
                raise ShapeMismatch(f"layer {i}: MaxPool needs a spatial input")
        elif isinstance(layer, GlobalAvgPool):
            if not spatial:
                raise ShapeMismatch(f"layer {i}: GlobalAvgPool needs a spatial input")
            spatial = False
        elif isinstance(layer, Dense):
            if spatial:
                raise ShapeMismatch(f"layer {i}: Dense needs a pooled (flat) input")
            if channels is not None and layer.in_dim != channels:
                raise ShapeMismatch(f"layer {i}: Dense expects {layer.in_dim} features, gets {channels}")
            channels = layer.out_dim
        elif not isinstance(layer, (Relu, Dropout)):
            raise ShapeMismatch(f"layer {i}: unknown layer {layer!r}")
    if spatial or channels is None:
        raise ShapeMismatch("network must end in a flat Dense output")
    if not isinstance([l for l in spec if not isinstance(l, Dropout)][-1], Dense):
        raise ShapeMismatch("last parametric layer must be Dense")


def build_network(spec=None, seed: int = 0, n_classes: int = N_CLASSES) -> Network:
    """Initialize parameters He-uniformly (``U(-sqrt(6/fan_in), +)``), biases zero."""
    spec = list(default_spec() if spec is None else spec)
    _check_chain(spec)
    last = [l for l in spec if isinstance(l, Dense)][-1]
    if last.out_dim != n_classes:
        raise ShapeMismatch(f"final Dense must output {n_classes} classes, got {last.out_dim}")
    rng = np.random.default_rng(seed)
    params = {}
    for i, layer in enumerate(spec):
        if isinstance(layer, Conv2d):
            fan_in = layer.in_channels * layer.kernel_size ** 2
            lim = np.sqrt(6.0 / fan_in)
            shape = (layer.out_channels, layer.in_channels, layer.kernel_size, layer.kernel_size)
            params[f"{i}.W"] = rng.uniform(-lim, lim, size=shape)
            params[f"{i}.b"] = np.zeros(layer.out_channels)
        elif isinstance(layer, Dense):
            lim = np.sqrt(6.0 / layer.in_dim)
            params[f"{i}.W"] = rng.uniform(-lim, lim, size=(layer.in_dim, layer.out_dim))
            params[f"{i}.b"] = np.zeros(layer.out_dim)
    return Network(spec, params)


# -- per-layer kernels -----------------------------------------------------------


def _conv_forward(x, W, b, stride):
    n, c, h, w = x.shape
    o, ci, k, _ = W.shape
    if c != ci:
        raise ShapeMismatch(f"Conv2d expects {ci} input channels, got {c}")
    if h < k or w < k:
        raise ShapeMismatch(f"input {h}x{w} smaller than kernel {k}")
    win = sliding_window_view(x, (k, k), axis=(2, 3))[:, :, ::stride, ::stride]
    ho, wo = win.shape[2], win.shape[3]
    cols = win.transpose(0, 2, 3, 1, 4, 5).reshape(n * ho * wo, c * k * k)
    out = cols @ W.reshape(o, -1).T + b
    out = out.reshape(n, ho, wo, o).transpose(0, 3, 1, 2)
    return out, (x.shape, cols, ho, wo)


def _conv_backward(dout, cache, W, stride):
    x_shape, cols, ho, wo = cache
    n, c, h, w = x_shape
    o, _, k, _ = W.shape
    dflat = dout.transpose(0, 2, 3, 1).reshape(-1, o)
    dW = (dflat.T @ cols).reshape(W.shape)
    db = dflat.sum(axis=0)
    dcols = (dflat @ W.reshape(o, -1)).reshape(n, ho, wo, c, k, k)
    dx = np.zeros(x_shape)
    for i in range(k):
        for j in range(k):
            dx[:, :, i:i + stride * (ho - 1) + 1:stride, j:j + stride * (wo - 1) + 1:stride] += \
                dcols[:, :, :, :, i, j].transpose(0, 3, 1, 2)
    return dx, dW, db


def _pool_forward(x, s):
    n, c, h, w = x.shape
    ho, wo = h // s, w // s
    if ho == 0 or wo == 0:
        raise ShapeMismatch(f"input {h}x{w} smaller than pool size {s}")
    xr = x[:, :, :ho * s, :wo * s].reshape(n, c, ho, s, wo, s).transpose(0, 1, 2, 4, 3, 5)
    xr = xr.reshape(n, c, ho, wo, s * s)
    idx = xr.argmax(axis=-1)[..., None]  # first max wins ties
    out = np.take_along_axis(xr, idx, axis=-1)[..., 0]
    return out, (x.shape, idx)


def _pool_backward(dout, cache, s):
    x_shape, idx = cache
    n, c, h, w = x_shape
    ho, wo = dout.shape[2], dout.shape[3]
    dxr = np.zeros((n, c, ho, wo, s * s))
    np.put_along_axis(dxr, idx, dout[..., None], axis=-1)
    dxr = dxr.reshape(n, c, ho, wo, s, s).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, ho * s, wo * s)
    dx = np.zeros(x_shape)
    dx[:, :, :ho * s, :wo * s] = dxr
    return dx


# -- passes --------------------------------------------------------------------


def layer_forward(layer, params: dict, x, training: bool = False, rng=None):
    """One layer's forward pass; ``params`` holds its ``W``/``b`` if any.

    Returns ``(output, cache)``.
    """
    if isinstance(layer, Conv2d):
        return _conv_forward(x, params["W"], params["b"], layer.stride)
    if isinstance(layer, Relu):
        mask = x > 0
        return x * mask, mask
    if isinstance(layer, MaxPool):
        return _pool_forward(x, layer.size)
    if isinstance(layer, GlobalAvgPool):
        if x.ndim != 4:
            raise ShapeMismatch(f"GlobalAvgPool expects NCHW, got {x.shape}")
        return x.mean(axis=(2, 3)), x.shape
    if isinstance(layer, Dense):
        if x.ndim != 2 or x.shape[1] != layer.in_dim:
            raise ShapeMismatch(f"Dense expects (N, {layer.in_dim}), got {x.shape}")
        return x @ params["W"] + params["b"], x
    if isinstance(layer, Dropout):
        if not training or layer.rate == 0:
            return x, None
        if rng is None:
            raise ValueError("training-mode dropout needs an rng")
        mask = (rng.random(x.shape) >= layer.rate) / (1.0 - layer.rate)
        return x * mask, mask
    raise ShapeMismatch(f"unknown layer {layer!r}")


def layer_backward(layer, params: dict, grad, cache):
    """Returns ``(grad_input, {"W": dW, "b": db})`` (empty dict for parameter-free layers)."""
    if isinstance(layer, Conv2d):
        dx, dW, db = _conv_backward(grad, cache, params["W"], layer.stride)
        return dx, {"W": dW, "b": db}
    if isinstance(layer, Relu):
        return grad * cache, {}
    if isinstance(layer, MaxPool):
        return _pool_backward(grad, cache, layer.size), {}
    if isinstance(layer, GlobalAvgPool):
        n, c, h, w = cache
        return np.broadcast_to(grad[:, :, None, None] / (h * w), cache).copy(), {}
    if isinstance(layer, Dense):
        return grad @ params["W"].T, {"W": cache.T @ grad, "b": grad.sum(axis=0)}
    if isinstance(layer, Dropout):
        return (grad if cache is None else grad * cache), {}
    raise ShapeMismatch(f"unknown layer {layer!r}")


def _layer_params(net: Network, i: int) -> dict:
    return {k: net.params[f"{i}.{k}"] for k in ("W", "b") if f"{i}.{k}" in net.params}


def forward(net: Network, batch, training: bool = False, rng=None):
    """Run the network; returns ``(logits, cache)``.

    Dropout is inverted dropout and is only active when ``training``; it then
    draws its masks from ``rng`` (a ``numpy.random.Generator``).
    """
    x = np.asarray(batch, dtype=np.float64)
    if x.ndim != 4:
        raise ShapeMismatch(f"expected an NCHW batch, got shape {x.shape}")
    caches = []
    for i, layer in enumerate(net.spec):
        x, c = layer_forward(layer, _layer_params(net, i), x, training, rng)
        caches.append(c)
    return x, {"caches": caches, "out_shape": x.shape}


def backward(net: Network, cache, grad_logits) -> dict:
    """Parameter gradients given ``dLoss/dlogits`` for the cached batch."""
    grad = np.asarray(grad_logits, dtype=np.float64)
    if tuple(grad.shape) != tuple(cache["out_shape"]) or len(cache["caches"]) != len(net.spec):
        raise StaleCache(f"gradient shape {grad.shape} does not match cached forward {cache['out_shape']}")
    grads = {}
    for i in range(len(net.spec) - 1, -1, -1):
        grad, pg = layer_backward(net.spec[i], _layer_params(net, i), grad, cache["caches"][i])
        for k, v in pg.items():
            grads[f"{i}.{k}"] = v
    return {k: grads[k] for k in net.params}


def logits(net: Network, batch, chunk: int = 1024) -> np.ndarray:
    x = np.asarray(batch, dtype=np.float64)
    if len(x) == 0:
        return np.zeros((0, net.spec[-1].out_dim))
    return np.concatenate([forward(net, x[s:s + chunk])[0] for s in range(0, len(x), chunk)])


def predict(net: Network, batch, chunk: int = 1024) -> np.ndarray:
    """Class indices; ``np.argmax`` keeps the lowest index on ties."""
    return np.argmax(logits(net, batch, chunk), axis=1)


# -- checkpoints -----------------------------------------------------------------

MAGIC = b"TNET"
VERSION = 1


def save_checkpoint(net: Network, path, meta: dict | None = None) -> None:
    """Binary layout: ``TNET``, u32 version, u32 header length, JSON header,
    then one little-endian float64 block per parameter in header order."""
    header = {
        "layers": spec_to_dicts(net.spec),
        "params": [{"name": k, "shape": list(v.shape)} for k, v in net.params.items()],
        "meta": meta or {},
    }
    hbytes = json.dumps(header, sort_keys=True).encode()
    buf = io.BytesIO()
    buf.write(MAGIC)
    buf.write(struct.pack("<II", VERSION, len(hbytes)))
    buf.write(hbytes)
    for arr in net.params.values():
        buf.write(np.ascontiguousarray(arr, dtype="<f8").tobytes())
    Path(path).write_bytes(buf.getvalue())


def load_checkpoint(path) -> tuple[Network, dict]:
    data = Path(path).read_bytes()
    if data[:4] != MAGIC:
        raise CheckpointError("not a TNET checkpoint")
    version, hlen = struct.unpack_from("<II", data, 4)
    if version != VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    header = json.loads(data[12:12 + hlen])
    spec = spec_from_dicts(header["layers"])
    offset = 12 + hlen
    params = {}
    for p in header["params"]:
        count = int(np.prod(p["shape"])) if p["shape"] else 1
        nbytes = 8 * count
        if offset + nbytes > len(data):
            raise CheckpointError("truncated parameter block")
        params[p["name"]] = np.frombuffer(data, dtype="<f8", count=count, offset=offset).reshape(p["shape"]).astype(np.float64)
        offset += nbytes
    if offset != len(data):
        raise CheckpointError("trailing bytes after parameter blocks")
    net = Network(spec, params)
    _check_chain(spec)
    return net, header.get("meta", {})
