"""Gated-convolution decoder that fuses the image pyramid into one image."""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .tensor import (ShapeError, conv2d, conv2d_backward, elu, elu_backward, sigmoid,
                     upsample2x, upsample2x_backward)

HIDDEN = 32
SH_CHANNELS = 27
RGB_CHANNELS = 3
SH_C0 = 0.28209479177387814


@dataclass
class DecoderConfig:
    n_layers: int = 4
    n_features: int = 4
    hidden: int = HIDDEN
    kernel_size: int = 3
    use_sh: bool = True

    @property
    def out_channels(self):
        return SH_CHANNELS if self.use_sh else RGB_CHANNELS

    def in_channels(self, level):
        raster = self.n_features + 1
        return raster if level == self.n_layers - 1 else raster + self.hidden


def _kaiming_uniform(rng, shape, dtype):
    fan_in = int(np.prod(shape[1:]))
    bound = math.sqrt(6.0 / fan_in)
    return rng.uniform(-bound, bound, size=shape).astype(dtype)


def init_block(rng, c_in, hidden=HIDDEN, k=3, dtype=np.float32, gate_bias=1.0):
    return {
        "wf": _kaiming_uniform(rng, (hidden, c_in, k, k), dtype),
        "bf": np.zeros(hidden, dtype),
        "wg": _kaiming_uniform(rng, (hidden, c_in, k, k), dtype),
        "bg": np.full(hidden, gate_bias, dtype),
        # bypass starts small so the gated path dominates early on
        "wb": (0.1 * _kaiming_uniform(rng, (hidden, c_in, 1, 1), dtype)).astype(dtype),
        "bb": np.zeros(hidden, dtype),
    }


def gated_conv_block(x, p):
    """``ELU(conv_f(x)) * sigmoid(conv_g(x)) + conv_1x1(x)``.

    Returns ``(out, cache)``.
    """
    if x.shape[0] != p["wf"].shape[1]:
        raise ShapeError(f"channel axis: block expects {p['wf'].shape[1]} channels, got {x.shape[0]}")
    hidden = p["wf"].shape[0]
    kernel = np.concatenate([p["wf"], p["wg"]], axis=0)
    bias = np.concatenate([p["bf"], p["bg"]])
    fg = conv2d(x, kernel, bias)
    f, g = fg[:hidden], fg[hidden:]
    act = elu(f)
    gate = sigmoid(g)
    out = act * gate + conv2d(x, p["wb"], p["bb"])
    return out, (x, f, act, gate, kernel)


def gated_conv_block_backward(grad, p, cache):
    """Return ``(grad_x, grads)`` where ``grads`` mirrors the parameter dict."""
    x, f, act, gate, kernel = cache
    hidden = p["wf"].shape[0]
    d_f = elu_backward(grad * gate, f)
    d_g = grad * act * gate * (1 - gate)
    gx, gk, gbias = conv2d_backward(np.concatenate([d_f, d_g], axis=0), x, kernel)
    gxb, gwb, gbb = conv2d_backward(grad, x, p["wb"])
    grads = {"wf": gk[:hidden], "bf": gbias[:hidden], "wg": gk[hidden:], "bg": gbias[hidden:],
             "wb": gwb, "bb": gbb}
    return gx + gxb, grads


class Decoder:
    """One gated block per pyramid level, coarse to fine, then a 1x1 projection.

    Parameters live in a :class:`~trips.tensor.ParameterStore` under
    ``decoder.block{L}.*`` and ``decoder.out.*``.
    """

    def __init__(self, config: DecoderConfig):
        self.config = config

    def block_names(self, level):
        return {k: f"decoder.block{level}.{k}" for k in ("wf", "bf", "wg", "bg", "wb", "bb")}

    def init_params(self, store, rng):
        cfg = self.config
        dtype = store.dtype
        for level in range(cfg.n_layers):
            params = init_block(rng, cfg.in_channels(level), cfg.hidden, cfg.kernel_size, dtype)
            for k, name in self.block_names(level).items():
                store.add(name, params[k], "network")
        w = 0.1 * _kaiming_uniform(rng, (cfg.out_channels, cfg.hidden, 1, 1), dtype)
        b = np.zeros(cfg.out_channels, dtype)
        if cfg.use_sh:
            b[0::9] = 0.5 / SH_C0  # band-0 term per colour -> mid grey
        else:
            b[:] = 0.5
        store.add("decoder.out.w", w, "network")
        store.add("decoder.out.b", b, "network")

    def _params(self, store, level):
        return {k: store.value(name) for k, name in self.block_names(level).items()}

    def parameter_count(self, store):
        return sum(p.value.size for p in store if p.name.startswith("decoder."))

    def forward(self, store, pyramid):
        cfg = self.config
        if len(pyramid) != cfg.n_layers:
            raise ShapeError(f"pyramid has {len(pyramid)} layers, decoder expects {cfg.n_layers}")
        caches = []
        h = None
        for level in range(cfg.n_layers - 1, -1, -1):
            layer = pyramid[level]
            if h is None:
                x = layer
                up_shape = None
            else:
                up = upsample2x(h)
                up_shape = up.shape
                x = np.concatenate([layer, up[:, :layer.shape[1], :layer.shape[2]]], axis=0)
            h, cache = gated_conv_block(x, self._params(store, level))
            caches.append((level, up_shape, cache))
        out = conv2d(h, store.value("decoder.out.w"), store.value("decoder.out.b"))
        return out, (caches, h)

    def backward(self, store, cache, grad):
        """Accumulate parameter gradients into ``store``; return per-layer pyramid gradients."""
        cfg = self.config
        caches, h = cache
        gh, gw, gb = conv2d_backward(grad, h, store.value("decoder.out.w"))
        store.accumulate("decoder.out.w", gw)
        store.accumulate("decoder.out.b", gb)
        grad_pyramid = [None] * cfg.n_layers
        nraster = cfg.n_features + 1
        for level, up_shape, bcache in reversed(caches):
            params = self._params(store, level)
            gx, grads = gated_conv_block_backward(gh, params, bcache)
            for k, name in self.block_names(level).items():
                store.accumulate(name, grads[k])
            if up_shape is None:
                grad_pyramid[level] = gx
                continue
            grad_pyramid[level] = gx[:nraster]
            gup = np.zeros(up_shape, dtype=gx.dtype)
            gup[:, :gx.shape[1], :gx.shape[2]] = gx[nraster:]
            gh = upsample2x_backward(gup)
        return grad_pyramid
