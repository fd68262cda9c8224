"""Differentiable operations on NCHW tensors."""

from __future__ import annotations

from typing import Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from . import profiling
from .tensor import Tensor, make_result


def _as_tensor(x, like: Tensor | None = None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    dtype = like.dtype if like is not None else None
    return Tensor(np.asarray(x), dtype=dtype)


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def _check_rank4(x: Tensor, what: str):
    if x.data.ndim != 4:
        raise ValueError(f"{what}: expected an (N, C, H, W) tensor, got shape {x.shape}")


# ---------------------------------------------------------------------------
# elementwise


def add(x, y) -> Tensor:
    x = _as_tensor(x)
    y = _as_tensor(y, like=x)
    try:
        out = x.data + y.data
    except ValueError:
        raise ValueError(f"add: incompatible shapes {x.shape} and {y.shape}") from None
    sx, sy = x.shape, y.shape
    return make_result(out, (x, y), lambda g: (_unbroadcast(g, sx), _unbroadcast(g, sy)), "add")


def mul(x, y) -> Tensor:
    x = _as_tensor(x)
    y = _as_tensor(y, like=x)
    try:
        out = x.data * y.data
    except ValueError:
        raise ValueError(f"mul: incompatible shapes {x.shape} and {y.shape}") from None
    xd, yd = x.data, y.data

    def bw(g):
        return _unbroadcast(g * yd, xd.shape), _unbroadcast(g * xd, yd.shape)

    return make_result(out, (x, y), bw, "mul")


def scale(x: Tensor, factor: float) -> Tensor:
    return make_result(x.data * factor, (x,), lambda g: (g * factor,), "scale")


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    return make_result(np.where(mask, x.data, 0).astype(x.dtype), (x,), lambda g: (g * mask,), "relu")


def total(x: Tensor) -> Tensor:
    """Sum of all elements as a 0-d tensor."""
    shape = x.shape
    return make_result(np.asarray(x.data.sum()), (x,), lambda g: (np.broadcast_to(g, shape).copy(),), "sum")


def mean(x: Tensor) -> Tensor:
    n = x.data.size
    shape = x.shape
    return make_result(
        np.asarray(x.data.mean()), (x,), lambda g: (np.full(shape, g / n, dtype=x.dtype),), "mean"
    )


def concat_channels(xs: Sequence[Tensor]) -> Tensor:
    if not xs:
        raise ValueError("concat_channels: empty input list")
    for x in xs:
        _check_rank4(x, "concat_channels")
    ref = xs[0].shape
    for x in xs[1:]:
        if (x.shape[0], x.shape[2], x.shape[3]) != (ref[0], ref[2], ref[3]):
            raise ValueError(f"concat_channels: shapes {ref} and {x.shape} differ outside the channel axis")
    splits = np.cumsum([x.shape[1] for x in xs])[:-1]
    out = np.concatenate([x.data for x in xs], axis=1)
    return make_result(out, tuple(xs), lambda g: tuple(np.split(g, splits, axis=1)), "concat")


def concat_batch(xs: Sequence[Tensor]) -> Tensor:
    """Stack tensors along the leading (batch) axis."""
    if not xs:
        raise ValueError("concat_batch: empty input list")
    ref = xs[0].shape[1:]
    for x in xs[1:]:
        if x.shape[1:] != ref:
            raise ValueError(f"concat_batch: shapes {xs[0].shape} and {x.shape} differ outside the batch axis")
    splits = np.cumsum([x.shape[0] for x in xs])[:-1]
    out = np.concatenate([x.data for x in xs], axis=0)
    return make_result(out, tuple(xs), lambda g: tuple(np.split(g, splits, axis=0)), "concat_batch")


def batch_slice(x: Tensor, start: int, stop: int) -> Tensor:
    """Rows ``start:stop`` of the leading axis."""
    shape = x.shape

    def bw(g):
        full = np.zeros(shape, dtype=g.dtype)
        full[start:stop] = g
        return (full,)

    return make_result(x.data[start:stop].copy(), (x,), bw, "batch_slice")


# ---------------------------------------------------------------------------
# convolution


def _im2col(xp: np.ndarray, kh: int, kw: int, stride: int) -> np.ndarray:
    n, c = xp.shape[:2]
    win = sliding_window_view(xp, (kh, kw), axis=(2, 3))[:, :, ::stride, ::stride]
    ho, wo = win.shape[2], win.shape[3]
    # (N, C, kh, kw, Ho, Wo) -> (N, C*kh*kw, Ho*Wo)
    return np.ascontiguousarray(win.transpose(0, 1, 4, 5, 2, 3)).reshape(n, c * kh * kw, ho * wo), ho, wo


def conv2d(x: Tensor, weight: Tensor, bias: Tensor | None = None, stride: int = 1, padding: int = 0) -> Tensor:
    """2-D cross-correlation of ``x`` (N, Cin, H, W) with ``weight`` (Cout, Cin, kh, kw).

    Output size is ``floor((H + 2*padding - kh) / stride) + 1`` per axis.
    """
    _check_rank4(x, "conv2d")
    if weight.data.ndim != 4 or weight.shape[1] != x.shape[1]:
        raise ValueError(
            f"conv2d: weight shape {weight.shape} does not match input shape {x.shape} (Cin mismatch)"
        )
    if stride < 1 or padding < 0:
        raise ValueError(f"conv2d: need stride >= 1 and padding >= 0, got stride={stride} padding={padding}")
    n, cin, h, w = x.shape
    cout, _, kh, kw = weight.shape
    if h + 2 * padding < kh or w + 2 * padding < kw:
        raise ValueError(f"conv2d: kernel {weight.shape} larger than padded input {x.shape}")
    if bias is not None and bias.shape != (cout,):
        raise ValueError(f"conv2d: bias shape {bias.shape} does not match Cout={cout}")

    w2 = weight.data.reshape(cout, -1)
    if kh == 1 and kw == 1 and padding == 0:
        xs = x.data[:, :, ::stride, ::stride] if stride > 1 else x.data
        ho, wo = xs.shape[2], xs.shape[3]
        cols = xs.reshape(n, cin, ho * wo)
        pointwise = True
    else:
        xp = np.pad(x.data, ((0, 0), (0, 0), (padding, padding), (padding, padding))) if padding else x.data
        cols, ho, wo = _im2col(xp, kh, kw, stride)
        pointwise = False
    out = np.matmul(w2, cols).reshape(n, cout, ho, wo)
    profiling.record("conv2d", n * cout * ho * wo * cin * kh * kw)
    if bias is not None:
        out += bias.data.reshape(1, cout, 1, 1)

    def bw(g):
        g2 = g.reshape(n, cout, ho * wo)
        gw = np.tensordot(g2, cols, axes=([0, 2], [0, 2])).reshape(weight.shape) if weight.requires_grad else None
        gb = g.sum(axis=(0, 2, 3)) if bias is not None and bias.requires_grad else None
        gx = None
        if x.requires_grad:
            gcols = np.matmul(w2.T, g2)
            if pointwise:
                if stride == 1:
                    gx = gcols.reshape(x.shape)
                else:
                    gx = np.zeros(x.shape, dtype=g.dtype)
                    gx[:, :, ::stride, ::stride] = gcols.reshape(n, cin, ho, wo)
            else:
                gcols = gcols.reshape(n, cin, kh, kw, ho, wo)
                gxp = np.zeros((n, cin, h + 2 * padding, w + 2 * padding), dtype=g.dtype)
                for a in range(kh):
                    for b in range(kw):
                        gxp[:, :, a : a + stride * ho : stride, b : b + stride * wo : stride] += gcols[:, :, a, b]
                gx = gxp[:, :, padding : padding + h, padding : padding + w] if padding else gxp
        if bias is None:
            return gx, gw
        return gx, gw, gb

    parents = (x, weight) if bias is None else (x, weight, bias)
    return make_result(out, parents, bw, "conv2d")


# ---------------------------------------------------------------------------
# resampling


def upsample_matrix(n: int, dtype=np.float64) -> np.ndarray:
    """(2n, n) linear-interpolation matrix, half-pixel centers, edge-clamped.

    Output index o samples source coordinate (o + 0.5) / 2 - 0.5.
    """
    m = np.zeros((2 * n, n), dtype=dtype)
    for o in range(2 * n):
        src = max((o + 0.5) / 2.0 - 0.5, 0.0)
        i0 = min(int(np.floor(src)), n - 1)
        i1 = min(i0 + 1, n - 1)
        frac = src - i0
        m[o, i0] += 1.0 - frac
        m[o, i1] += frac
    return m


def bilinear_upsample2x(x: Tensor) -> Tensor:
    """Bilinear 2x upsampling with half-pixel centers (no corner alignment)."""
    _check_rank4(x, "bilinear_upsample2x")
    n, c, h, w = x.shape
    if h < 1 or w < 1:
        raise ValueError(f"bilinear_upsample2x: empty spatial size {x.shape}")
    uh = upsample_matrix(h, x.dtype)
    uw = upsample_matrix(w, x.dtype)
    out = np.matmul(np.matmul(uh, x.data), uw.T)

    def bw(g):
        return (np.matmul(np.matmul(uh.T, g), uw),)

    return make_result(out, (x,), bw, "upsample2x")


def avgpool2x(x: Tensor) -> Tensor:
    _check_rank4(x, "avgpool2x")
    n, c, h, w = x.shape
    if h % 2 or w % 2:
        raise ValueError(f"avgpool2x: spatial size must be even, got {x.shape}")
    out = x.data.reshape(n, c, h // 2, 2, w // 2, 2).mean(axis=(3, 5))

    def bw(g):
        return (np.repeat(np.repeat(g, 2, axis=2), 2, axis=3) * 0.25,)

    return make_result(out, (x,), bw, "avgpool2x")


def maxpool2d(x: Tensor, kernel: int = 3, stride: int = 2, padding: int = 1) -> Tensor:
    _check_rank4(x, "maxpool2d")
    n, c, h, w = x.shape
    xp = np.pad(x.data, ((0, 0), (0, 0), (padding, padding), (padding, padding)), constant_values=-np.inf)
    win = sliding_window_view(xp, (kernel, kernel), axis=(2, 3))[:, :, ::stride, ::stride]
    ho, wo = win.shape[2], win.shape[3]
    flat = win.reshape(n, c, ho, wo, kernel * kernel)
    arg = flat.argmax(axis=-1)
    out = np.take_along_axis(flat, arg[..., None], axis=-1)[..., 0]

    def bw(g):
        gxp = np.zeros(xp.shape, dtype=g.dtype)
        di, dj = np.divmod(arg, kernel)
        rows = di + (np.arange(ho) * stride)[None, None, :, None]
        cols = dj + (np.arange(wo) * stride)[None, None, None, :]
        nn_, cc = np.meshgrid(np.arange(n), np.arange(c), indexing="ij")
        np.add.at(gxp, (nn_[:, :, None, None], cc[:, :, None, None], rows, cols), g)
        return (gxp[:, :, padding : padding + h, padding : padding + w],)

    return make_result(out, (x,), bw, "maxpool2d")


# ---------------------------------------------------------------------------
# normalization


def batch_norm(
    x: Tensor,
    gamma: Tensor,
    beta: Tensor,
    running_mean: np.ndarray,
    running_var: np.ndarray,
    training: bool,
    momentum: float = 0.1,
    eps: float = 1e-5,
) -> Tensor:
    """Per-channel affine normalization.

    In training mode batch statistics are used and the running buffers are
    updated in place; in evaluation mode the running buffers are used.
    """
    _check_rank4(x, "batch_norm")
    n, c, h, w = x.shape
    shp = (1, c, 1, 1)
    g = gamma.data.reshape(shp)
    if training:
        mu = x.data.mean(axis=(0, 2, 3))
        var = x.data.var(axis=(0, 2, 3))
        m = n * h * w
        running_mean *= 1 - momentum
        running_mean += momentum * mu
        running_var *= 1 - momentum
        running_var += momentum * var * (m / max(m - 1, 1))
    else:
        mu, var = running_mean.astype(x.dtype), running_var.astype(x.dtype)
    inv = (1.0 / np.sqrt(var + eps)).astype(x.dtype)
    xhat = (x.data - mu.reshape(shp)) * inv.reshape(shp)
    out = xhat * g + beta.data.reshape(shp)

    def bw(go):
        ggamma = (go * xhat).sum(axis=(0, 2, 3))
        gbeta = go.sum(axis=(0, 2, 3))
        gxhat = go * g
        if training:
            m = n * h * w
            gx = (inv.reshape(shp) / m) * (
                m * gxhat
                - gxhat.sum(axis=(0, 2, 3), keepdims=True)
                - xhat * (gxhat * xhat).sum(axis=(0, 2, 3), keepdims=True)
            )
        else:
            gx = gxhat * inv.reshape(shp)
        return gx, ggamma, gbeta

    return make_result(out, (x, gamma, beta), bw, "batch_norm")


# ---------------------------------------------------------------------------
# softmax


def masked_softmax(logits: Tensor, valid, axis: int = -1) -> Tensor:
    """Softmax over ``axis`` restricted to entries where ``valid`` is true.

    Invalid entries get weight exactly 0. Every slice must contain at least one
    valid entry.
    """
    valid = np.broadcast_to(np.asarray(valid, dtype=bool), logits.shape)
    if not valid.any(axis=axis).all():
        raise ValueError("masked_softmax: a slice has no valid entries and cannot be normalized")
    z = np.where(valid, logits.data, -np.inf)
    z = z - z.max(axis=axis, keepdims=True)
    e = np.where(valid, np.exp(z), 0.0).astype(logits.dtype)
    p = e / e.sum(axis=axis, keepdims=True)

    def bw(g):
        return (p * (g - (g * p).sum(axis=axis, keepdims=True)),)

    return make_result(p, (logits,), bw, "masked_softmax")


def dot_last(x: Tensor, y: Tensor) -> Tensor:
    """Inner product over the last axis (broadcasting leading axes)."""
    out = (x.data * y.data).sum(axis=-1)

    def bw(g):
        g = g[..., None]
        return _unbroadcast(g * y.data, x.shape), _unbroadcast(g * x.data, y.shape)

    return make_result(out, (x, y), bw, "dot")
