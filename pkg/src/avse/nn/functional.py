"""Forward and backward kernels on NCHW numpy arrays.

Convolutions use "same" padding: a strided convolution maps a spatial size
``n`` to ``ceil(n / stride)`` and the transposed convolution maps ``n`` to
``n * stride``, being the exact adjoint of the former.
"""

from __future__ import annotations

import math

import numpy as np


def same_padding(size: int, kernel: int, stride: int) -> tuple[int, int, int]:
    """Return ``(out, pad_before, pad_after)`` for a "same" convolution."""
    out = math.ceil(size / stride)
    total = max((out - 1) * stride + kernel - size, 0)
    return out, total // 2, total - total // 2


def _pads(hw, kernel, stride):
    (h, w), (kh, kw), (sh, sw) = hw, kernel, stride
    ho, pt, pb = same_padding(h, kh, sh)
    wo, pl, pr = same_padding(w, kw, sw)
    return (ho, wo), ((pt, pb), (pl, pr))


def _im2col(xp, kernel, stride, out_hw):
    """Stack shifted views into a ``(kh*kw*C, N*Ho*Wo)`` matrix."""
    n, c = xp.shape[:2]
    (kh, kw), (sh, sw), (ho, wo) = kernel, stride, out_hw
    cols = np.empty((kh, kw, c, n, ho, wo), dtype=xp.dtype)
    for i in range(kh):
        for j in range(kw):
            patch = xp[:, :, i : i + sh * (ho - 1) + 1 : sh, j : j + sw * (wo - 1) + 1 : sw]
            cols[i, j] = patch.transpose(1, 0, 2, 3)
    return cols.reshape(kh * kw * c, n * ho * wo)


def _col2im(dcols, padded_shape, kernel, stride, out_hw):
    """Adjoint of :func:`_im2col`; returns an ``(N, C, Hp, Wp)`` array."""
    n, c, hp, wp = padded_shape
    (kh, kw), (sh, sw), (ho, wo) = kernel, stride, out_hw
    dcols = dcols.reshape(kh, kw, c, n, ho, wo)
    acc = np.zeros((c, n, hp, wp), dtype=dcols.dtype)
    for i in range(kh):
        for j in range(kw):
            acc[:, :, i : i + sh * (ho - 1) + 1 : sh, j : j + sw * (wo - 1) + 1 : sw] += dcols[i, j]
    return acc.transpose(1, 0, 2, 3)


def _weight_matrix(w):
    # (F, C, kh, kw) -> (F, kh*kw*C), matching the _im2col row order
    f = w.shape[0]
    return w.transpose(0, 2, 3, 1).reshape(f, -1)


def _from_weight_matrix(wm, shape):
    f, c, kh, kw = shape
    return wm.reshape(f, kh, kw, c).transpose(0, 3, 1, 2)


def _check_conv(x, w, in_channels_axis):
    if x.ndim != 4:
        raise ValueError(f"expected NCHW input, got shape {x.shape}")
    if w.ndim != 4 or x.shape[1] != w.shape[in_channels_axis]:
        raise ValueError(f"input channels {x.shape[1]} do not match weight shape {w.shape}")


def conv2d(x, w, b=None, stride=(1, 1)):
    """Cross-correlation of ``x`` (N, C, H, W) with ``w`` (F, C, kh, kw)."""
    y, _ = conv2d_forward(x, w, b, stride)
    return y


def conv2d_forward(x, w, b, stride):
    _check_conv(x, w, 1)
    kernel = w.shape[2:]
    out_hw, pads = _pads(x.shape[2:], kernel, stride)
    xp = np.pad(x, ((0, 0), (0, 0)) + pads)
    cols = _im2col(xp, kernel, stride, out_hw)
    y = (_weight_matrix(w) @ cols).reshape((w.shape[0], x.shape[0]) + out_hw)
    y = y.transpose(1, 0, 2, 3)
    if b is not None:
        y = y + b.reshape(1, -1, 1, 1)
    cache = (x.shape, xp.shape, cols, pads, out_hw)
    return np.ascontiguousarray(y), cache


def conv2d_backward(dy, w, stride, cache, input_grad=True):
    x_shape, xp_shape, cols, pads, out_hw = cache
    kernel = w.shape[2:]
    f = w.shape[0]
    d = dy.transpose(1, 0, 2, 3).reshape(f, -1)
    dw = _from_weight_matrix(d @ cols.T, w.shape)
    db = d.sum(axis=1)
    if not input_grad:
        return None, dw, db
    dxp = _col2im(_weight_matrix(w).T @ d, xp_shape, kernel, stride, out_hw)
    (pt, _), (pl, _) = pads
    dx = dxp[:, :, pt : pt + x_shape[2], pl : pl + x_shape[3]]
    return np.ascontiguousarray(dx), dw, db


def conv2d_transpose(x, w, b=None, stride=(1, 1)):
    """Transposed convolution with ``w`` of shape (C_in, C_out, kh, kw).

    Output spatial size is ``in * stride``. With the same ``w`` this is the
    adjoint of :func:`conv2d` applied to an input of the output's size.
    """
    y, _ = conv2d_transpose_forward(x, w, b, stride)
    return y


def conv2d_transpose_forward(x, w, b, stride):
    _check_conv(x, w, 0)
    n, _, h, wd = x.shape
    kernel = w.shape[2:]
    (sh, sw) = stride
    out_h, out_w = h * sh, wd * sw
    (ho, wo), pads = _pads((out_h, out_w), kernel, stride)
    assert (ho, wo) == (h, wd)
    (pt, pb), (pl, pr) = pads
    cout = w.shape[1]
    padded_shape = (n, cout, out_h + pt + pb, out_w + pl + pr)
    x_mat = x.transpose(1, 0, 2, 3).reshape(x.shape[1], -1)
    dcols = _weight_matrix(w).T @ x_mat
    yp = _col2im(dcols, padded_shape, kernel, stride, (h, wd))
    y = yp[:, :, pt : pt + out_h, pl : pl + out_w]
    if b is not None:
        y = y + b.reshape(1, -1, 1, 1)
    return np.ascontiguousarray(y), (x_mat, pads, (h, wd))


def conv2d_transpose_backward(dy, w, stride, cache):
    x_mat, pads, in_hw = cache
    kernel = w.shape[2:]
    dyp = np.pad(dy, ((0, 0), (0, 0)) + pads)
    cols = _im2col(dyp, kernel, stride, in_hw)
    wm = _weight_matrix(w)
    cin = w.shape[0]
    dx = (wm @ cols).reshape((cin, dy.shape[0]) + tuple(in_hw)).transpose(1, 0, 2, 3)
    dw = _from_weight_matrix(x_mat @ cols.T, w.shape)
    db = dy.sum(axis=(0, 2, 3))
    return np.ascontiguousarray(dx), dw, db


def dense(x, w, b=None):
    """``x @ w.T + b`` for ``x`` of shape (N, D_in) and ``w`` (D_out, D_in)."""
    if x.ndim != 2 or x.shape[1] != w.shape[1]:
        raise ValueError(f"input shape {x.shape} incompatible with weight {w.shape}")
    y = x @ w.T
    if b is not None:
        y = y + b
    return y


def dense_backward(dy, x, w):
    return dy @ w, dy.T @ x, dy.sum(axis=0)


def _channels_view(x):
    # (N, C) or (N, C, H, W) -> (N, C, K) so reductions run as contiguous einsums
    return x.reshape(x.shape[0], x.shape[1], -1)


def batchnorm_train(x, gamma, beta, eps):
    """Normalise with batch statistics; returns output, batch mean/var and cache."""
    xr = _channels_view(x)
    count = xr.shape[0] * xr.shape[2]
    if count < 2:
        raise ValueError("batchnorm in train mode needs at least 2 values per channel")
    mean = np.einsum("nck->c", xr) / count
    xhat = xr - mean[:, None]
    var = np.einsum("nck,nck->c", xhat, xhat) / count
    inv_std = (1.0 / np.sqrt(var + eps)).astype(x.dtype)
    xhat *= inv_std[:, None]
    y = xhat * gamma[:, None].astype(x.dtype)
    y += beta[:, None].astype(x.dtype)
    return y.reshape(x.shape), mean, var, (xhat, inv_std)


def batchnorm_infer(x, gamma, beta, running_mean, running_var, eps):
    scale = gamma / np.sqrt(running_var + eps)
    shift = beta - running_mean * scale
    y = _channels_view(x) * scale[:, None].astype(x.dtype)
    y += shift[:, None].astype(x.dtype)
    return y.reshape(x.shape)


def batchnorm_backward(dy, gamma, cache):
    xhat, inv_std = cache
    dyr = _channels_view(dy)
    count = dyr.shape[0] * dyr.shape[2]
    dgamma = np.einsum("nck,nck->c", dyr, xhat)
    dbeta = np.einsum("nck->c", dyr)
    dx = xhat * (dgamma / count)[:, None].astype(dy.dtype)
    np.subtract(dyr, dx, out=dx)
    dx -= (dbeta / count)[:, None].astype(dy.dtype)
    dx *= (gamma * inv_std)[:, None].astype(dy.dtype)
    return dx.reshape(dy.shape), dgamma, dbeta


def leaky_relu(x, slope):
    """``x`` where nonnegative, ``slope * x`` elsewhere (``0 <= slope <= 1``)."""
    return np.maximum(x, x * x.dtype.type(slope))


def leaky_relu_backward(dy, mask, slope):
    """``mask`` is ``x >= 0`` from the forward pass."""
    g = mask.astype(dy.dtype)
    g *= dy.dtype.type(1.0 - slope)
    g += dy.dtype.type(slope)
    g *= dy
    return g


def maxpool2(x):
    """2x2 max pooling with stride 2; odd trailing rows/columns are dropped."""
    y, _ = maxpool2_forward(x)
    return y


def _quadrants(x, ho, wo):
    return (
        x[:, :, 0 : 2 * ho : 2, 0 : 2 * wo : 2],
        x[:, :, 0 : 2 * ho : 2, 1 : 2 * wo : 2],
        x[:, :, 1 : 2 * ho : 2, 0 : 2 * wo : 2],
        x[:, :, 1 : 2 * ho : 2, 1 : 2 * wo : 2],
    )


def maxpool2_forward(x):
    ho, wo = x.shape[2] // 2, x.shape[3] // 2
    a, b, c, d = _quadrants(x, ho, wo)
    y = np.maximum(np.maximum(a, b), np.maximum(c, d))
    return y, (x, y)


def maxpool2_backward(dy, cache):
    """Route ``dy`` to the first maximal entry (row-major) of each window."""
    x, y = cache
    ho, wo = dy.shape[2:]
    dx = np.zeros(x.shape, dtype=dy.dtype)
    free = np.ones(y.shape, dtype=bool)
    for xq, dxq in zip(_quadrants(x, ho, wo), _quadrants(dx, ho, wo)):
        hit = xq == y
        hit &= free
        np.multiply(dy, hit, out=dxq)
        free &= ~hit
    return dx


def dropout_mask(shape, rate, rng, dtype=np.float32):
    """Inverted-dropout mask: zeros with probability ``rate``, else ``1/(1-rate)``."""
    keep = rng.random(shape, dtype=np.float32) >= rate
    return keep.astype(dtype) / dtype(1.0 - rate) if rate > 0 else np.ones(shape, dtype)


def dropout(x, rate, train, rng=None):
    if not train or rate == 0:
        return x
    if rng is None:
        rng = np.random.default_rng()
    return x * dropout_mask(x.shape, rate, rng, x.dtype.type)


def mse_loss(pred, target) -> float:
    if pred.shape != target.shape:
        raise ValueError(f"shape mismatch: {pred.shape} vs {target.shape}")
    diff = pred - target
    return float(np.mean(diff * diff))


def mse_loss_grad(pred, target):
    if pred.shape != target.shape:
        raise ValueError(f"shape mismatch: {pred.shape} vs {target.shape}")
    return (2.0 / pred.size) * (pred - target)
