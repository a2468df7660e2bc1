"""Differentiable building blocks on channels-last (X, Y, Z, C) arrays.

Every layer is a pair of functions: ``op(...) -> (out, cache)`` and
``op_backward(dout, cache) -> grads``.  Arrays keep whatever float dtype they
come in with, so the same code runs in f32 for training and f64 for
gradient checks.
"""

from __future__ import annotations

import math
from typing import Sequence

import numpy as np

_OFFSETS = [(a, b, c) for a in range(3) for b in range(3) for c in range(3)]


class LayerError(ValueError):
    pass


# convolution ---------------------------------------------------------------


# Small-channel convolutions are bound by per-call overhead of 27 thin
# matmuls, so the cheapest layout is an offset-major copy of the padded
# input (27, X, Y, Z, Cin); above this many elements the strided windows of
# the padded input are used directly to save memory.
IM2COL_LIMIT = 1 << 25


def _shift_conv(xp, k, shape):
    X, Y, Z = shape
    out = xp[:X, :Y, :Z] @ k[0, 0, 0]
    for a, bb, c in _OFFSETS[1:]:
        out += xp[a : a + X, bb : bb + Y, c : c + Z] @ k[a, bb, c]
    return out


def conv3d(x: np.ndarray, k: np.ndarray, b: np.ndarray):
    """3x3x3 cross-correlation, stride 1, zero ('same') padding.

    x: (X, Y, Z, Cin), k: (3, 3, 3, Cin, Cout), b: (Cout,).
    """
    if x.shape[-1] != k.shape[3]:
        raise LayerError(f"input has {x.shape[-1]} channels, kernel expects {k.shape[3]}")
    X, Y, Z, cin = x.shape
    xp = np.pad(x, ((1, 1), (1, 1), (1, 1), (0, 0)))
    if X * Y * Z * 27 * cin > IM2COL_LIMIT:
        out = _shift_conv(xp, k, (X, Y, Z))
        out += b
        return out, ("shift", xp, k)
    cols = np.empty((27, X, Y, Z, cin), dtype=x.dtype)
    for i, (a, bb, c) in enumerate(_OFFSETS):
        cols[i] = xp[a : a + X, bb : bb + Y, c : c + Z]
    k3 = k.reshape(27, cin, -1)
    out = cols[0] @ k3[0]
    for i in range(1, 27):
        out += cols[i] @ k3[i]
    out += b
    return out, ("cols", cols, k)


def conv3d_backward(dout: np.ndarray, cache):
    kind, data, k = cache
    X, Y, Z, cout = dout.shape
    cin = k.shape[3]
    d2 = dout.reshape(-1, cout)
    db = d2.sum(axis=0)
    if kind == "cols":
        c3 = data.reshape(27, -1, cin)
        dk = np.stack([c3[i].T @ d2 for i in range(27)]).reshape(k.shape)
    else:
        dk = np.stack([data[a : a + X, bb : bb + Y, c : c + Z].reshape(-1, cin).T @ d2
                       for a, bb, c in _OFFSETS]).reshape(k.shape)
    # the input gradient is a convolution of dout with the flipped,
    # transposed kernel
    kf = np.ascontiguousarray(k[::-1, ::-1, ::-1].swapaxes(3, 4))
    dp = np.pad(dout, ((1, 1), (1, 1), (1, 1), (0, 0)))
    dx = _shift_conv(dp, kf, (X, Y, Z))
    return dx, dk, db


# normalization -------------------------------------------------------------


def group_norm(x, scale, offset, groups: int, eps: float = 1e-6, frozen: bool = False):
    """Group normalization over all spatial positions and in-group channels.

    With ``frozen`` the statistics are fixed at mean 0 / variance 1 and only
    the affine part runs; every output voxel then depends on its own input
    voxel alone, which spatial sharding needs for exact stitching.
    """
    C = x.shape[-1]
    if C % groups:
        raise LayerError(f"{C} channels not divisible into {groups} groups")
    if frozen:
        return x * scale + offset, ("frozen", x, scale)
    # statistics from per-channel sums: contiguous reductions are much
    # faster than reducing the strided (V, groups, C/groups) view
    x2 = x.reshape(-1, C)
    d = x2 - _group_mean(x2, groups)
    var = _group_mean(d * d, groups)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (d * inv).reshape(x.shape)
    return xhat * scale + offset, ("group", xhat, inv, scale, groups)


def _group_mean(v2: np.ndarray, groups: int) -> np.ndarray:
    # mean over rows and in-group channels, broadcast back per channel
    C = v2.shape[1]
    g = v2.sum(axis=0).reshape(groups, -1).sum(axis=1) / (v2.shape[0] * (C // groups))
    return np.repeat(g, C // groups)


def group_norm_backward(dout, cache):
    if cache[0] == "frozen":
        _, x, scale = cache
        axes = tuple(range(dout.ndim - 1))
        return dout * scale, (dout * x).sum(axis=axes), dout.sum(axis=axes)
    _, xhat, inv, scale, groups = cache
    C = dout.shape[-1]
    d2 = dout.reshape(-1, C)
    xh = xhat.reshape(-1, C)
    dscale = (d2 * xh).sum(axis=0)
    doffset = d2.sum(axis=0)
    dxhat = d2 * scale
    m = _group_mean(dxhat, groups)
    mx = _group_mean(dxhat * xh, groups)
    dx = inv * (dxhat - m - xh * mx)
    return dx.reshape(dout.shape), dscale, doffset


# activations ---------------------------------------------------------------


def swish(x):
    s = 0.5 * (1.0 + np.tanh(0.5 * x))  # overflow-free sigmoid
    return x * s, (x, s)


def swish_backward(dout, cache):
    x, s = cache
    return dout * (s * (1.0 + x * (1.0 - s)))


def dropout(x, rate: float, rng: np.random.Generator | None, train: bool):
    """Feature-channel dropout: whole channels are zeroed and the rest
    rescaled by 1/(1-rate).  Identity outside training or at rate 0."""
    if not train or rate == 0.0:
        return x, None
    if rng is None:
        raise LayerError("dropout in train mode needs an rng")
    keep = (rng.random(x.shape[-1]) >= rate).astype(x.dtype) / (1.0 - rate)
    return x * keep, keep


def dropout_backward(dout, keep):
    return dout if keep is None else dout * keep


# lead-time conditioning ----------------------------------------------------


def sinusoidal_embed(h: int, dim: int = 32, dtype=np.float32) -> np.ndarray:
    """Transformer-style embedding: e[2i] = sin(h / 10000^(2i/dim)),
    e[2i+1] = cos(same)."""
    if h < 0:
        raise LayerError(f"lead time must be non-negative, got {h}")
    if dim % 2:
        raise LayerError("embedding dim must be even")
    i = np.arange(dim // 2, dtype=np.float64)
    angle = h / np.power(10000.0, 2.0 * i / dim)
    e = np.empty(dim, dtype=np.float64)
    e[0::2] = np.sin(angle)
    e[1::2] = np.cos(angle)
    return e.astype(dtype)


def film(x, embed, w, b):
    """FiLM: ``(1 + gamma) * x + beta`` with ``[gamma, beta] = embed @ w + b``.

    w: (E, 2F), b: (2F,).  gamma and beta broadcast over space.
    """
    F = x.shape[-1]
    gb = embed @ w + b
    gamma, beta = gb[:F], gb[F:]
    return (1.0 + gamma) * x + beta, (x, embed, gamma)


def film_backward(dout, cache):
    x, embed, gamma = cache
    axes = tuple(range(dout.ndim - 1))
    dgamma = (dout * x).sum(axis=axes)
    dbeta = dout.sum(axis=axes)
    dgb = np.concatenate([dgamma, dbeta])
    return dout * (1.0 + gamma), np.outer(embed, dgb), dgb


# resampling ----------------------------------------------------------------


def resample_down(x, factors: Sequence[int]):
    """Block-mean pooling over the three spatial axes."""
    fx, fy, fz = factors
    X, Y, Z, C = x.shape
    if X % fx or Y % fy or Z % fz:
        raise LayerError(f"extent {(X, Y, Z)} not divisible by {tuple(factors)}")
    out = x.reshape(X // fx, fx, Y // fy, fy, Z // fz, fz, C).mean(axis=(1, 3, 5))
    return out, (tuple(factors), x.shape)


def resample_down_backward(dout, cache):
    (fx, fy, fz), shape = cache
    g = dout / (fx * fy * fz)
    g = np.repeat(np.repeat(np.repeat(g, fx, axis=0), fy, axis=1), fz, axis=2)
    return g.reshape(shape)


def repeat_up(x, factors: Sequence[int]):
    fx, fy, fz = factors
    out = np.repeat(np.repeat(np.repeat(x, fx, axis=0), fy, axis=1), fz, axis=2)
    return out, tuple(factors)


def repeat_up_backward(dout, factors):
    fx, fy, fz = factors
    X, Y, Z, C = dout.shape
    return dout.reshape(X // fx, fx, Y // fy, fy, Z // fz, fz, C).sum(axis=(1, 3, 5))


def resample_up(x, factors, k, b):
    """Nearest-neighbour repeat followed by a 3x3x3 convolution."""
    r, rc = repeat_up(x, factors)
    out, cc = conv3d(r, k, b)
    return out, (rc, cc)


def resample_up_backward(dout, cache):
    rc, cc = cache
    dr, dk, db = conv3d_backward(dout, cc)
    return repeat_up_backward(dr, rc), dk, db


# residual block ------------------------------------------------------------


def resblock(x, p: dict, embed, groups: int, dropout_rate: float = 0.0,
             train: bool = False, rng=None, frozen_norm: bool = False, eps: float = 1e-6):
    """Pre-activation residual block:

    GN -> swish -> conv -> GN -> FiLM -> swish -> [dropout] -> conv, plus skip.
    """
    h1, c1 = group_norm(x, p["gn1.scale"], p["gn1.offset"], groups, eps, frozen_norm)
    h2, c2 = swish(h1)
    h3, c3 = conv3d(h2, p["conv1.k"], p["conv1.b"])
    h4, c4 = group_norm(h3, p["gn2.scale"], p["gn2.offset"], groups, eps, frozen_norm)
    h5, c5 = film(h4, embed, p["film.w"], p["film.b"])
    h6, c6 = swish(h5)
    h7, c7 = dropout(h6, dropout_rate, rng, train)
    h8, c8 = conv3d(h7, p["conv2.k"], p["conv2.b"])
    if h8.shape != x.shape:
        raise LayerError(f"residual shape mismatch {h8.shape} vs {x.shape}")
    return x + h8, (c1, c2, c3, c4, c5, c6, c7, c8)


def resblock_backward(dout, cache):
    c1, c2, c3, c4, c5, c6, c7, c8 = cache
    g = {}
    d7, g["conv2.k"], g["conv2.b"] = conv3d_backward(dout, c8)
    d6 = dropout_backward(d7, c7)
    d5 = swish_backward(d6, c6)
    d4, g["film.w"], g["film.b"] = film_backward(d5, c5)
    d3, g["gn2.scale"], g["gn2.offset"] = group_norm_backward(d4, c4)
    d2, g["conv1.k"], g["conv1.b"] = conv3d_backward(d3, c3)
    d1 = swish_backward(d2, c2)
    dx, g["gn1.scale"], g["gn1.offset"] = group_norm_backward(d1, c1)
    return dout + dx, g


def truncated_normal(rng: np.random.Generator, shape, std: float) -> np.ndarray:
    """Normal samples redrawn until inside two standard deviations."""
    out = rng.standard_normal(shape)
    bad = np.abs(out) > 2.0
    while bad.any():
        out[bad] = rng.standard_normal(int(bad.sum()))
        bad = np.abs(out) > 2.0
    # variance of a unit normal truncated at +-2
    return out * (std / math.sqrt(0.7737413))
