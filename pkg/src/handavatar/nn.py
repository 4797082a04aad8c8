"""Small network building blocks on top of the tape: perceptrons, strided
convolutions, group normalization, and upsampling."""

from __future__ import annotations

import numpy as np

from . import tape
from .tape import Tensor, astensor, custom_op

_ACTIVATIONS = {
    "relu": tape.relu,
    "silu": tape.silu,
    "sigmoid": tape.sigmoid,
    "tanh": tape.tanh,
    None: lambda x: x,
    "none": lambda x: x,
}


def he_init(rng, fan_in, shape):
    return rng.standard_normal(shape) * np.sqrt(2.0 / fan_in)


class Mlp:
    """Fully connected stack with a per-layer activation spec.

    Parameters are registered under ``<prefix>.w<i>`` / ``<prefix>.b<i>``.
    ``zero_last=True`` zero-initializes the final layer so the network starts
    as the constant-zero map (decoders rely on this).
    """

    def __init__(self, params, prefix, sizes, activations, rng, zero_last=False):
        if len(activations) != len(sizes) - 1:
            raise ValueError("need one activation per layer")
        self.sizes = list(sizes)
        self.activations = list(activations)
        self.weights = []
        self.biases = []
        for i, (n_in, n_out) in enumerate(zip(sizes[:-1], sizes[1:])):
            last = i == len(sizes) - 2
            if zero_last and last:
                w = np.zeros((n_in, n_out))
            else:
                w = he_init(rng, n_in, (n_in, n_out))
            self.weights.append(params.add(f"{prefix}.w{i}", w))
            self.biases.append(params.add(f"{prefix}.b{i}", np.zeros(n_out)))

    def __call__(self, x):
        x = astensor(x)
        expected = self.sizes[0]
        if x.shape[-1] != expected:
            raise ValueError(
                f"mlp input size {x.shape[-1]} does not match layer 0 (expected {expected})")
        for i, (w, b, act) in enumerate(zip(self.weights, self.biases, self.activations)):
            x = tape.matmul(x, w) + b
            if act not in _ACTIVATIONS:
                raise ValueError(f"unknown activation {act!r} at layer {i}")
            x = _ACTIVATIONS[act](x)
        return x


def conv2d(x, w, b, stride=1, pad=0):
    """2D convolution, NCHW. ``w`` is (Cout, Cin, kh, kw). Single custom op
    with an im2col forward and col2im backward."""
    x, w, b = astensor(x), astensor(w), astensor(b)
    xd, wd = x.data, w.data
    n, cin, h, wdt = xd.shape
    cout, cin2, kh, kw = wd.shape
    if cin != cin2:
        raise ValueError(f"conv2d channel mismatch: input {cin}, kernel {cin2}")
    if pad:
        xp = np.pad(xd, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    else:
        xp = xd
    hp, wp = xp.shape[2], xp.shape[3]
    ho = (hp - kh) // stride + 1
    wo = (wp - kw) // stride + 1
    win = np.lib.stride_tricks.sliding_window_view(xp, (kh, kw), axis=(2, 3))
    win = win[:, :, ::stride, ::stride]  # n, cin, ho, wo, kh, kw
    cols = win.transpose(0, 2, 3, 1, 4, 5).reshape(n * ho * wo, cin * kh * kw)
    wmat = wd.reshape(cout, -1).T
    out = (cols @ wmat).reshape(n, ho, wo, cout).transpose(0, 3, 1, 2) + b.data[None, :, None, None]

    def bw(g):
        gmat = g.transpose(0, 2, 3, 1).reshape(n * ho * wo, cout)
        gw = (cols.T @ gmat).T.reshape(wd.shape)
        gb = gmat.sum(axis=0)
        gcols = gmat @ wmat.T
        gcols = gcols.reshape(n, ho, wo, cin, kh, kw).transpose(0, 3, 1, 2, 4, 5)
        gxp = np.zeros_like(xp)
        for i in range(kh):
            for j in range(kw):
                gxp[:, :, i:i + ho * stride:stride, j:j + wo * stride:stride] += gcols[..., i, j]
        gx = gxp[:, :, pad:hp - pad, pad:wp - pad] if pad else gxp
        return gx, gw, gb

    return custom_op(out, (x, w, b), bw)


def group_norm(x, num_groups, gamma, beta, eps=1e-5):
    """Group normalization over channel groups, NCHW."""
    n, c, h, w = x.shape
    if c % num_groups:
        raise ValueError("channels must divide into groups")
    xg = tape.reshape(x, (n, num_groups, c // num_groups * h * w))
    mu = tape.tmean(xg, axis=2)
    mu = tape.reshape(mu, (n, num_groups, 1))
    cent = xg - mu
    var = tape.tmean(cent * cent, axis=2)
    var = tape.reshape(var, (n, num_groups, 1))
    normed = cent / tape.sqrt(var + eps)
    normed = tape.reshape(normed, (n, c, h, w))
    g = tape.reshape(astensor(gamma), (1, c, 1, 1))
    b = tape.reshape(astensor(beta), (1, c, 1, 1))
    return normed * g + b


def upsample_nearest2(x):
    """Nearest-neighbor x2 upsampling, NCHW."""
    x = astensor(x)
    out = np.repeat(np.repeat(x.data, 2, axis=2), 2, axis=3)

    def bw(g):
        n, c, h2, w2 = g.shape
        return (g.reshape(n, c, h2 // 2, 2, w2 // 2, 2).sum(axis=(3, 5)),)

    return custom_op(out, (x,), bw)


def upsample_bilinear(x, factor):
    """Bilinear upsampling by an integer factor (align_corners=False)."""
    x = astensor(x)
    n, c, h, w = x.shape
    ho, wo = h * factor, w * factor
    ys = (np.arange(ho) + 0.5) / factor - 0.5
    xs = (np.arange(wo) + 0.5) / factor - 0.5
    y0 = np.clip(np.floor(ys).astype(int), 0, h - 1)
    y1 = np.clip(y0 + 1, 0, h - 1)
    x0 = np.clip(np.floor(xs).astype(int), 0, w - 1)
    x1 = np.clip(x0 + 1, 0, w - 1)
    wy = np.clip(ys - np.floor(ys), 0.0, 1.0)
    wx = np.clip(xs - np.floor(xs), 0.0, 1.0)
    wy = np.where(y1 == y0, 0.0, wy)
    wx = np.where(x1 == x0, 0.0, wx)

    d = x.data
    top = d[:, :, y0][:, :, :, x0] * (1 - wx) + d[:, :, y0][:, :, :, x1] * wx
    bot = d[:, :, y1][:, :, :, x0] * (1 - wx) + d[:, :, y1][:, :, :, x1] * wx
    out = top * (1 - wy)[None, None, :, None] + bot * wy[None, None, :, None]

    def bw(g):
        gx = np.zeros_like(d)
        gt = g * (1 - wy)[None, None, :, None]
        gb = g * wy[None, None, :, None]
        for gpart, yi in ((gt, y0), (gb, y1)):
            gl = gpart * (1 - wx)
            gr = gpart * wx
            np.add.at(gx, (slice(None), slice(None), yi[:, None], x0[None, :]), gl)
            np.add.at(gx, (slice(None), slice(None), yi[:, None], x1[None, :]), gr)
        return (gx,)

    return custom_op(out, (x,), bw)


def avg_pool2(x):
    """2x2 average pooling (H, W must be even), NCHW."""
    n, c, h, w = x.shape
    xr = tape.reshape(x, (n, c, h // 2, 2, w // 2, 2))
    return tape.tmean(tape.tmean(xr, axis=5), axis=3)
