"""Spatial ops on [N,C,H,W] tensors: convolution, resizing, upsampling.

conv2d lowers to an im2col GEMM on the forward pass and rebuilds the
column matrix during backward instead of keeping it alive on the tape,
trading one extra strided copy for an order of magnitude less memory.
"""

from __future__ import annotations

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import ShapeError
from .tensor import Tensor, _coerce, _finish, matmul


def _im2col(xp: np.ndarray, kh: int, kw: int, stride: int) -> np.ndarray:
    """[N,C,Hp,Wp] padded input -> [N*Ho*Wo, C*kh*kw] patch matrix."""
    windows = sliding_window_view(xp, (kh, kw), axis=(2, 3))
    windows = windows[:, :, ::stride, ::stride]  # [N,C,Ho,Wo,kh,kw]
    n, c, ho, wo = windows.shape[:4]
    cols = windows.transpose(0, 2, 3, 1, 4, 5).reshape(n * ho * wo, c * kh * kw)
    return np.ascontiguousarray(cols)


def conv2d(x, k, stride: int = 1, pad: int = 0) -> Tensor:
    """Cross-correlation of [N,Cin,H,W] with kernels [Cout,Cin,kh,kw].

    Output spatial size is floor((H + 2*pad - kh) / stride) + 1.  No
    kernel flip.  Differentiable in both x and k; the input gradient is
    skipped entirely when x does not require grad (e.g. raw images).
    """
    x, k = _coerce(x), _coerce(k)
    if x.data.ndim != 4 or k.data.ndim != 4:
        raise ShapeError(
            f"conv2d: expected 4-D input and kernel, got {x.data.shape} and {k.data.shape}"
        )
    n, cin, h, w = x.data.shape
    cout, cin_k, kh, kw = k.data.shape
    if cin != cin_k:
        raise ShapeError(f"conv2d: input channels {cin} != kernel channels {cin_k}")
    if kh % 2 == 0 or kw % 2 == 0:
        raise ShapeError(f"conv2d: kernel extents must be odd, got {kh}x{kw}")
    if stride < 1 or pad < 0:
        raise ShapeError(f"conv2d: invalid stride {stride} or pad {pad}")
    ho = (h + 2 * pad - kh) // stride + 1
    wo = (w + 2 * pad - kw) // stride + 1
    if ho < 1 or wo < 1 or h + 2 * pad < kh or w + 2 * pad < kw:
        raise ShapeError(f"conv2d: kernel {kh}x{kw} exceeds padded input {h + 2 * pad}x{w + 2 * pad}")

    if pad:
        xp = np.pad(x.data, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    else:
        xp = x.data
    cols = _im2col(xp, kh, kw, stride)
    w2 = k.data.reshape(cout, cin * kh * kw)
    out = (cols @ w2.T).reshape(n, ho, wo, cout).transpose(0, 3, 1, 2)
    need_dx = x.requires_grad

    def backward(g):
        g2 = np.ascontiguousarray(g.transpose(0, 2, 3, 1).reshape(n * ho * wo, cout))
        cols_b = _im2col(xp, kh, kw, stride)  # rebuilt, not stored
        dk = (g2.T @ cols_b).reshape(k.data.shape)
        if not need_dx:
            return None, dk
        dcols = g2 @ w2
        dwin = dcols.reshape(n, ho, wo, cin, kh, kw).transpose(0, 3, 1, 2, 4, 5)
        dxp = np.zeros_like(xp)
        for i in range(kh):
            for j in range(kw):
                dxp[:, :, i : i + stride * ho : stride, j : j + stride * wo : stride] += dwin[
                    :, :, :, :, i, j
                ]
        dx = dxp[:, :, pad : pad + h, pad : pad + w] if pad else dxp
        return dx, dk

    return _finish("conv2d", out, (x, k), backward)


def conv2d_bias(x, k, b, stride: int = 1, pad: int = 0) -> Tensor:
    """conv2d followed by a per-output-channel bias add."""
    b = _coerce(b)
    out = conv2d(x, k, stride, pad)
    return out + b.reshape((1, b.data.shape[0], 1, 1))


def _bilinear_matrix(src: int, dst: int) -> np.ndarray:
    """[dst, src] align-corners-false interpolation weights for one axis."""
    m = np.zeros((dst, src))
    scale = src / dst
    for d in range(dst):
        pos = (d + 0.5) * scale - 0.5
        lo = int(np.floor(pos))
        frac = pos - lo
        lo_c = min(max(lo, 0), src - 1)
        hi_c = min(max(lo + 1, 0), src - 1)
        m[d, lo_c] += 1.0 - frac
        m[d, hi_c] += frac
    return m


def _area_matrix(src: int, dst: int) -> np.ndarray:
    """[dst, src] adaptive box-average weights for one axis."""
    m = np.zeros((dst, src))
    scale = src / dst
    for d in range(dst):
        lo = d * scale
        hi = (d + 1) * scale
        for s in range(int(np.floor(lo)), int(np.ceil(hi))):
            overlap = min(hi, s + 1) - max(lo, s)
            if overlap > 0:
                m[d, s] = overlap / scale
    return m


def _resize_separable(x, size: int, row_m: np.ndarray, col_m: np.ndarray) -> Tensor:
    rows = Tensor(row_m)
    cols_t = Tensor(col_m.T)
    # out[n,c,s,t] = sum_h sum_w rows[s,h] * x[n,c,h,w] * cols[t,w]
    return matmul(matmul(rows, x), cols_t)


def resize_bilinear(x, size: int) -> Tensor:
    """Align-corners-false bilinear resize of [N,C,H,W] to [N,C,size,size].

    Implemented as two dense interpolation-matrix products, so gradients
    fall out of the generic matmul rule.  Exact identity when the source
    already has the target size.
    """
    x = _coerce(x)
    if x.data.ndim != 4:
        raise ShapeError(f"resize_bilinear: expected 4-D input, got {x.data.shape}")
    if size < 1:
        raise ShapeError(f"resize_bilinear: invalid size {size}")
    n, c, h, w = x.data.shape
    if h == size and w == size:
        return x
    return _resize_separable(x, size, _bilinear_matrix(h, size), _bilinear_matrix(w, size))


def resize_area(x, size: int) -> Tensor:
    """Adaptive box-average resize of [N,C,H,W] to [N,C,size,size]."""
    x = _coerce(x)
    if x.data.ndim != 4:
        raise ShapeError(f"resize_area: expected 4-D input, got {x.data.shape}")
    if size < 1:
        raise ShapeError(f"resize_area: invalid size {size}")
    n, c, h, w = x.data.shape
    if h == size and w == size:
        return x
    return _resize_separable(x, size, _area_matrix(h, size), _area_matrix(w, size))


def resize_to(x, size: int, mode: str = "bilinear") -> Tensor:
    """Resize dispatcher for the configurable interpolation mode."""
    if mode == "bilinear":
        return resize_bilinear(x, size)
    if mode == "area":
        return resize_area(x, size)
    raise ShapeError(f"resize_to: unknown mode {mode!r}")


def upsample_nearest2(x) -> Tensor:
    """Nearest-neighbor 2x upsampling of the trailing two axes."""
    x = _coerce(x)
    if x.data.ndim < 2:
        raise ShapeError(f"upsample_nearest2: expected >= 2-D input, got {x.data.shape}")
    out = np.repeat(np.repeat(x.data, 2, axis=-2), 2, axis=-1)

    def backward(g):
        lead = g.shape[:-2]
        h2, w2 = g.shape[-2], g.shape[-1]
        blocks = g.reshape(*lead, h2 // 2, 2, w2 // 2, 2)
        return (blocks.sum(axis=(-3, -1)),)

    return _finish("upsample_nearest2", out, (x,), backward)
