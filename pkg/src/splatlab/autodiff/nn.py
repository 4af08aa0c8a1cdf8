"""Convolution, activation and resampling ops on channels-last ``(H, W, C)`` tensors."""

from __future__ import annotations

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from scipy.special import erf

from .tensor import ShapeError, Tensor, as_tensor

_SQRT2 = np.sqrt(2.0)
_INV_SQRT2PI = 1.0 / np.sqrt(2.0 * np.pi)


def gelu(x: Tensor) -> Tensor:
    """Exact GeLU, ``x * Phi(x)`` with the Gaussian CDF."""
    xd = x.data
    cdf = (0.5 * (1.0 + erf(xd / _SQRT2))).astype(xd.dtype, copy=False)
    out = xd * cdf

    def bw(g):
        pdf = _INV_SQRT2PI * np.exp(-0.5 * xd * xd)
        return (g * (cdf + xd * pdf),)

    return Tensor._make(out, (x,), bw)


def conv2d(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """Stride-1 'same' convolution.

    ``x``: (H, W, Cin); ``weight``: (Cout, Cin, k, k) with odd k; ``bias``: (Cout,).
    Zero padding of ``k // 2``.
    """
    x, weight = as_tensor(x), as_tensor(weight)
    if x.ndim != 3 or weight.ndim != 4:
        raise ShapeError(f"conv2d expects (H,W,C) input and (Co,Ci,k,k) weight, got {x.shape}, {weight.shape}")
    cout, cin, kh, kw = weight.shape
    if kh != kw or kh % 2 == 0:
        raise ShapeError("conv2d kernel must be square with odd size")
    if x.shape[2] != cin:
        raise ShapeError(f"conv2d: input has {x.shape[2]} channels, weight expects {cin}")
    H, W, _ = x.shape
    p = kh // 2
    xd, wd = x.data, weight.data
    wm = wd.reshape(cout, cin * kh * kw)
    if p:
        xp = np.pad(xd, ((p, p), (p, p), (0, 0)))
        # im2col, columns ordered (cin, ky, kx) to match the weight layout
        col = sliding_window_view(xp, (kh, kw), axis=(0, 1)).reshape(H * W, cin * kh * kw)
    else:
        col = xd.reshape(H * W, cin)
    out = (col @ wm.T).reshape(H, W, cout)
    parents = [x, weight]
    if bias is not None:
        bias = as_tensor(bias)
        if bias.shape != (cout,):
            raise ShapeError("conv2d bias must have shape (Cout,)")
        out = out + bias.data
        parents.append(bias)

    def bw(g):
        g2 = g.reshape(H * W, cout)
        gw = (g2.T @ col).reshape(wd.shape)
        gcol = g2 @ wm
        if p:
            gcol = gcol.reshape(H, W, cin, kh, kw)
            gxp = np.zeros(xp.shape, dtype=xd.dtype)
            for dy in range(kh):
                for dx in range(kw):
                    gxp[dy:dy + H, dx:dx + W] += gcol[:, :, :, dy, dx]
            gx = gxp[p:p + H, p:p + W]
        else:
            gx = gcol.reshape(H, W, cin)
        grads = [gx, gw]
        if bias is not None:
            grads.append(g2.sum(axis=0))
        return tuple(grads)

    return Tensor._make(out.astype(xd.dtype, copy=False), parents, bw)


def conv3x3(x, weight, bias=None):
    if as_tensor(weight).shape[2:] != (3, 3):
        raise ShapeError("conv3x3 needs a 3x3 kernel")
    return conv2d(x, weight, bias)


def conv1x1(x, weight, bias=None):
    if as_tensor(weight).shape[2:] != (1, 1):
        raise ShapeError("conv1x1 needs a 1x1 kernel")
    return conv2d(x, weight, bias)


def _interp_matrix(n_out: int, n_in: int, dtype) -> np.ndarray:
    """Half-pixel-center linear interpolation matrix (n_out, n_in)."""
    m = np.zeros((n_out, n_in), dtype=dtype)
    scale = n_in / n_out
    src = (np.arange(n_out) + 0.5) * scale - 0.5
    src = np.clip(src, 0.0, n_in - 1)
    i0 = np.floor(src).astype(int)
    i1 = np.minimum(i0 + 1, n_in - 1)
    w1 = src - i0
    np.add.at(m, (np.arange(n_out), i0), 1.0 - w1)
    np.add.at(m, (np.arange(n_out), i1), w1)
    return m


def resize_matrices(in_hw, out_hw, dtype=np.float64):
    return _interp_matrix(out_hw[0], in_hw[0], dtype), _interp_matrix(out_hw[1], in_hw[1], dtype)


def bilinear_resize(x: Tensor, out_h: int, out_w: int) -> Tensor:
    """Bilinear resize with half-pixel centers (``align_corners=False``), edge clamped."""
    x = as_tensor(x)
    squeeze = x.ndim == 2
    xd = x.data[..., None] if squeeze else x.data
    ry, rx = resize_matrices(xd.shape[:2], (out_h, out_w), xd.dtype)
    out = rx @ np.tensordot(ry, xd, axes=(1, 0))
    if squeeze:
        out = out[..., 0]

    def bw(g):
        gg = g[..., None] if squeeze else g
        gx = np.tensordot(ry.T, rx.T @ gg, axes=(1, 0))
        return (gx[..., 0] if squeeze else gx,)

    return Tensor._make(out, (x,), bw)


def filter2d(x: Tensor, kernel: np.ndarray, stride: int = 1) -> Tensor:
    """Depthwise correlation with a fixed kernel, zero 'same' padding, optional stride."""
    x = as_tensor(x)
    k = np.asarray(kernel, dtype=x.dtype)
    kh, kw = k.shape
    H, W, C = x.shape
    ph, pw = kh // 2, kw // 2
    xp = np.pad(x.data, ((ph, ph), (pw, pw), (0, 0)))
    oh, ow = (H - 1) // stride + 1, (W - 1) // stride + 1
    out = np.zeros((oh, ow, C), dtype=x.dtype)
    for i in range(kh):
        for j in range(kw):
            if k[i, j] != 0:
                out += k[i, j] * xp[i:i + stride * oh:stride, j:j + stride * ow:stride]

    def bw(g):
        gxp = np.zeros(xp.shape, dtype=x.dtype)
        for i in range(kh):
            for j in range(kw):
                if k[i, j] != 0:
                    gxp[i:i + stride * oh:stride, j:j + stride * ow:stride] += g * k[i, j]
        return (gxp[ph:ph + H, pw:pw + W],)

    return Tensor._make(out, (x,), bw)
