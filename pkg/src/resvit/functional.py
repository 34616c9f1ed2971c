"""Differentiable primitives used by the generator and discriminator.

Convolutions are cross-correlations computed through an im2col matrix so
that forward, weight gradient and input gradient are each one GEMM plus a
gather/scatter over the k*k kernel offsets.
"""

from __future__ import annotations

from typing import Optional, Sequence

import numpy as np
from numpy.lib.stride_tricks import as_strided
from scipy.special import erf

from .errors import ConfigError, DimensionError, NumericError
from .tensor import Tensor, make_node, unbroadcast

_SQRT2 = np.sqrt(2.0)
_INV_SQRT_2PI = 1.0 / np.sqrt(2.0 * np.pi)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Batched matrix product ``a @ b`` with numpy broadcasting of batch axes."""
    x, y = a.data, b.data
    if x.ndim < 2 or y.ndim < 2:
        raise DimensionError(f"matmul needs >=2-d operands, got {x.shape} and {y.shape}")
    if x.shape[-1] != y.shape[-2]:
        raise DimensionError(f"matmul inner extents differ: {x.shape} @ {y.shape}")

    def back(g):
        ga = gb = None
        if a.requires_grad:
            ga = unbroadcast(g @ np.swapaxes(y, -1, -2), x.shape)
        if b.requires_grad:
            if y.ndim == 2 and x.ndim > 2:
                gb = x.reshape(-1, x.shape[-1]).T @ g.reshape(-1, g.shape[-1])
            else:
                gb = unbroadcast(np.swapaxes(x, -1, -2) @ g, y.shape)
        return ga, gb

    return make_node(x @ y, (a, b), back, "matmul")


# ----------------------------------------------------------------- convolution
def _out_size(n: int, k: int, stride: int, padding: int) -> int:
    return (n + 2 * padding - k) // stride + 1


def _im2col(xp: np.ndarray, k: int, stride: int, ho: int, wo: int) -> np.ndarray:
    """(N, C, Hp, Wp) padded input -> (N*ho*wo, C*k*k) patch matrix."""
    n, c = xp.shape[:2]
    sn, sc, sh, sw = xp.strides
    win = as_strided(xp, (n, ho, wo, c, k, k),
                     (sn, sh * stride, sw * stride, sc, sh, sw), writeable=False)
    return win.reshape(n * ho * wo, c * k * k)


def _col2im(cols: np.ndarray, shape: tuple, k: int, stride: int,
            ho: int, wo: int) -> np.ndarray:
    """Adjoint of ``_im2col``: scatter-add patch rows into a padded array."""
    n, c, hp, wp = shape
    # accumulate channel-last so every slab add is over contiguous rows
    out = np.zeros((n, hp, wp, c), dtype=cols.dtype)
    cols = np.ascontiguousarray(cols.reshape(n, ho, wo, c, k * k).transpose(4, 0, 1, 2, 3))
    hspan = stride * (ho - 1) + 1
    wspan = stride * (wo - 1) + 1
    for i in range(k):
        for j in range(k):
            out[:, i:i + hspan:stride, j:j + wspan:stride] += cols[i * k + j]
    return out.transpose(0, 3, 1, 2)


def _pad(x: np.ndarray, p: int) -> np.ndarray:
    if p == 0:
        return np.ascontiguousarray(x)
    return np.pad(x, ((0, 0), (0, 0), (p, p), (p, p)))


def conv2d(x: Tensor, weight: Tensor, bias: Optional[Tensor] = None,
           stride: int = 1, padding: int = 0) -> Tensor:
    """2-D cross-correlation of ``x`` (N, C, H, W) with ``weight`` (F, C, k, k)."""
    xd, wd = x.data, weight.data
    if xd.ndim != 4 or wd.ndim != 4:
        raise DimensionError(f"conv2d expects 4-d input and weight, got {xd.shape}, {wd.shape}")
    n, c, h, w = xd.shape
    f, cw, k, k2 = wd.shape
    if cw != c:
        raise DimensionError(f"conv2d: input has {c} channels, weight expects {cw}")
    if k != k2:
        raise DimensionError("conv2d: only square kernels are supported")
    if stride < 1 or padding < 0:
        raise DimensionError("conv2d: stride must be >= 1 and padding >= 0")
    ho, wo = _out_size(h, k, stride, padding), _out_size(w, k, stride, padding)
    if ho < 1 or wo < 1:
        raise DimensionError(f"conv2d: kernel {k} does not fit input {h}x{w} with padding {padding}")

    xp = _pad(xd, padding)
    cols = _im2col(xp, k, stride, ho, wo)
    w2 = wd.reshape(f, -1)
    out = cols @ w2.T
    if bias is not None:
        out += bias.data
    out = out.reshape(n, ho, wo, f).transpose(0, 3, 1, 2)
    padded_shape = xp.shape
    w_flip = wd[:, :, ::-1, ::-1].transpose(1, 0, 2, 3).reshape(c, -1)

    def back(g):
        g2 = g.transpose(0, 2, 3, 1).reshape(-1, f)
        gx = gw = gb = None
        if x.requires_grad and stride == 1 and padding < k:
            # full correlation with the flipped kernel; cheaper than a scatter
            gcols = _im2col(_pad(g, k - 1 - padding), k, 1, h, w)
            gx = (gcols @ w_flip.T).reshape(n, h, w, c).transpose(0, 3, 1, 2)
        elif x.requires_grad:
            gxp = _col2im(g2 @ w2, padded_shape, k, stride, ho, wo)
            gx = gxp[:, :, padding:padding + h, padding:padding + w] if padding else gxp
        if weight.requires_grad:
            gw = (g2.T @ cols).reshape(wd.shape)
        if bias is not None and bias.requires_grad:
            gb = g2.sum(axis=0)
        return gx, gw, gb

    parents = (x, weight) if bias is None else (x, weight, bias)
    return make_node(out, parents, back, "conv2d")


def conv_transpose2d(x: Tensor, weight: Tensor, bias: Optional[Tensor] = None,
                     stride: int = 1, padding: int = 0,
                     output_padding: int = 0) -> Tensor:
    """Transposed convolution; ``weight`` is (C_in, C_out, k, k).

    With the same weight array this is the exact adjoint of ``conv2d``.
    """
    xd, wd = x.data, weight.data
    if xd.ndim != 4 or wd.ndim != 4:
        raise DimensionError("conv_transpose2d expects 4-d input and weight")
    n, cin, h, w = xd.shape
    cw, cout, k, _ = wd.shape
    if cw != cin:
        raise DimensionError(f"conv_transpose2d: input has {cin} channels, weight expects {cw}")
    if stride < 1:
        raise DimensionError("conv_transpose2d: stride must be >= 1")
    if not 0 <= output_padding < stride:
        raise DimensionError("conv_transpose2d: output_padding must lie in [0, stride)")
    ho = (h - 1) * stride - 2 * padding + k + output_padding
    wo = (w - 1) * stride - 2 * padding + k + output_padding
    if ho < 1 or wo < 1:
        raise DimensionError(f"conv_transpose2d: negative output size {ho}x{wo}")

    x2 = xd.transpose(0, 2, 3, 1).reshape(-1, cin)
    w2 = wd.reshape(cin, -1)
    padded_shape = (n, cout, ho + 2 * padding, wo + 2 * padding)
    full = _col2im(x2 @ w2, padded_shape, k, stride, h, w)
    out = full[:, :, padding:padding + ho, padding:padding + wo]
    if bias is not None:
        out = out + bias.data.reshape(1, -1, 1, 1)
    else:
        out = np.ascontiguousarray(out)

    def back(g):
        gcols = _im2col(_pad(g, padding), k, stride, h, w)
        gx = gw = gb = None
        if x.requires_grad:
            gx = (gcols @ w2.T).reshape(n, h, w, cin).transpose(0, 3, 1, 2)
        if weight.requires_grad:
            gw = (x2.T @ gcols).reshape(wd.shape)
        if bias is not None and bias.requires_grad:
            gb = g.sum(axis=(0, 2, 3))
        return gx, gw, gb

    parents = (x, weight) if bias is None else (x, weight, bias)
    return make_node(out, parents, back, "conv_transpose2d")


# ------------------------------------------------------------- nonlinearities
def softmax(x: Tensor, axis: int = -1) -> Tensor:
    xd = x.data
    if np.isnan(xd).any():
        raise NumericError("softmax received NaN input")
    e = np.exp(xd - xd.max(axis=axis, keepdims=True))
    y = e / e.sum(axis=axis, keepdims=True)

    def back(g):
        return (y * (g - (g * y).sum(axis=axis, keepdims=True)),)

    return make_node(y, (x,), back, "softmax")


def normalize(x: Tensor, kind: str = "layer", gain: Optional[Tensor] = None,
              shift: Optional[Tensor] = None, eps: float = 1e-5) -> Tensor:
    """Layer norm over the last axis or instance norm over (H, W).

    ``gain``/``shift`` are applied after standardisation; for layer norm they
    have the size of the last axis, for instance norm one entry per channel.
    """
    if kind == "layer":
        axes: tuple = (-1,)
    elif kind == "instance":
        if x.ndim != 4:
            raise DimensionError("instance normalization expects (N, C, H, W)")
        axes = (2, 3)
    else:
        raise ConfigError(f"unknown normalization kind {kind!r}")
    xd = x.data
    mu = xd.mean(axis=axes, keepdims=True)
    xc = xd - mu
    var = (xc * xc).mean(axis=axes, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv

    def back(g):
        gm = g.mean(axis=axes, keepdims=True)
        gxm = (g * xhat).mean(axis=axes, keepdims=True)
        return (inv * (g - gm - xhat * gxm),)

    out = make_node(xhat, (x,), back, f"{kind}_norm")
    if gain is not None:
        out = out * (gain if kind == "layer" else gain.reshape(1, -1, 1, 1))
    if shift is not None:
        out = out + (shift if kind == "layer" else shift.reshape(1, -1, 1, 1))
    return out


def relu(x: Tensor) -> Tensor:
    xd = x.data
    mask = xd > 0
    return make_node(xd * mask, (x,), lambda g: (g * mask,), "relu")


def leaky_relu(x: Tensor, slope: float = 0.2) -> Tensor:
    xd = x.data
    factor = np.where(xd > 0, 1.0, slope).astype(xd.dtype)
    return make_node(xd * factor, (x,), lambda g: (g * factor,), "leaky_relu")


def tanh(x: Tensor) -> Tensor:
    y = np.tanh(x.data)
    return make_node(y, (x,), lambda g: (g * (1.0 - y * y),), "tanh")


def gelu(x: Tensor) -> Tensor:
    """Exact GELU, x * Phi(x)."""
    xd = x.data
    cdf = 0.5 * (1.0 + erf(xd / _SQRT2))
    pdf = _INV_SQRT_2PI * np.exp(-0.5 * xd * xd)
    return make_node(xd * cdf, (x,), lambda g: (g * (cdf + xd * pdf),), "gelu")


_ACTIVATIONS = {"relu": relu, "gelu": gelu, "tanh": tanh, "leaky_relu": leaky_relu}


def activation(kind: str, x: Tensor) -> Tensor:
    try:
        fn = _ACTIVATIONS[kind]
    except KeyError:
        raise ConfigError(f"unknown activation {kind!r}") from None
    return fn(x)


# -------------------------------------------------------------- resampling
def max_pool2d(x: Tensor, factor: int) -> Tensor:
    """Non-overlapping max pooling with window and stride ``factor``."""
    xd = x.data
    n, c, h, w = xd.shape
    if h % factor or w % factor:
        raise DimensionError(f"max_pool2d: {h}x{w} not divisible by {factor}")
    ho, wo = h // factor, w // factor
    blocks = xd.reshape(n, c, ho, factor, wo, factor).transpose(0, 1, 2, 4, 3, 5)
    blocks = blocks.reshape(n, c, ho, wo, factor * factor)
    idx = blocks.argmax(axis=-1)
    out = np.take_along_axis(blocks, idx[..., None], axis=-1)[..., 0]

    def back(g):
        gb = np.zeros(blocks.shape, dtype=g.dtype)
        np.put_along_axis(gb, idx[..., None], g[..., None], axis=-1)
        gb = gb.reshape(n, c, ho, wo, factor, factor).transpose(0, 1, 2, 4, 3, 5)
        return (gb.reshape(n, c, h, w),)

    return make_node(out, (x,), back, "max_pool2d")


def bilinear_matrix(n_in: int, n_out: int, dtype=np.float64) -> np.ndarray:
    """(n_out, n_in) interpolation matrix, half-pixel centres, edge clamped."""
    scale = n_in / n_out
    src = np.clip((np.arange(n_out) + 0.5) * scale - 0.5, 0.0, n_in - 1)
    lo = np.floor(src).astype(int)
    hi = np.minimum(lo + 1, n_in - 1)
    frac = src - lo
    m = np.zeros((n_out, n_in))
    np.add.at(m, (np.arange(n_out), lo), 1.0 - frac)
    np.add.at(m, (np.arange(n_out), hi), frac)
    return m.astype(dtype)


def upsample_bilinear(x: Tensor, size: Sequence[int]) -> Tensor:
    """Resize the trailing two axes of ``x`` to ``size`` by bilinear interpolation."""
    h, w = x.shape[-2:]
    ry = Tensor(bilinear_matrix(h, size[0], x.dtype))
    rx = Tensor(bilinear_matrix(w, size[1], x.dtype).T.copy())
    return matmul(matmul(ry, x), rx)


def dropout(x: Tensor, rate: float, rng: Optional[np.random.Generator],
            training: bool = True) -> Tensor:
    if not training or rate == 0.0:
        return x
    if rng is None:
        raise ConfigError("dropout with rate > 0 needs a random generator")
    keep = (rng.random(x.shape) >= rate).astype(x.dtype) / (1.0 - rate)
    return make_node(x.data * keep, (x,), lambda g: (g * keep,), "dropout")


# ------------------------------------------------------------------- losses
def l1(a: Tensor, b: Tensor) -> Tensor:
    return (a - b).abs().mean()


def mse(a: Tensor, target) -> Tensor:
    d = a - target
    return (d * d).mean()
