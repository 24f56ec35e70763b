"""Differentiable convolution kernels: standard and modulated deformable.

Both kernels are single tape nodes: the forward pass lowers to an
im2col (or bilinear-sampled) column matrix plus one batched GEMM, and
the backward rule routes gradients through the same column layout.
Column layout is channel-major: ``cols[n, c*K + k, l]`` where ``k``
indexes kernel taps row-major and ``l`` indexes output cells row-major.
"""
from __future__ import annotations

import numpy as np

from .autodiff import ShapeError, Tensor, _apply


def conv_output_size(n: int, k: int, stride: int, padding: int, dilation: int) -> int:
    eff = dilation * (k - 1) + 1
    return (n + 2 * padding - eff) // stride + 1


def _check_conv_shapes(x, w, b, stride, padding, dilation):
    if x.ndim != 4 or w.ndim != 4:
        raise ShapeError(f"expected NCHW input and OIHW weight, got {x.shape} / {w.shape}")
    n, c, h, wdt = x.shape
    co, cw, kh, kw = w.shape
    if c != cw:
        raise ShapeError(f"input channels {c} != weight in-channels {cw}")
    if b.shape != (co,):
        raise ShapeError(f"bias shape {b.shape} != ({co},)")
    if dilation < 1 or stride < 1 or padding < 0:
        raise ShapeError(
            f"invalid conv params stride={stride} padding={padding} dilation={dilation}"
        )
    ho = conv_output_size(h, kh, stride, padding, dilation)
    wo = conv_output_size(wdt, kw, stride, padding, dilation)
    if ho < 1 or wo < 1:
        raise ShapeError(
            f"kernel {kh}x{kw} (dilation {dilation}) does not fit input {h}x{wdt}"
        )
    return n, c, h, wdt, co, kh, kw, ho, wo


def _im2col(xp: np.ndarray, kh, kw, stride, dilation, ho, wo) -> np.ndarray:
    """Extract patches from the padded plane into (N, C, K, Ho*Wo)."""
    n, c = xp.shape[:2]
    cols = np.empty((n, c, kh * kw, ho, wo), dtype=xp.dtype)
    for u in range(kh):
        for v in range(kw):
            cols[:, :, u * kw + v] = xp[
                :,
                :,
                u * dilation : u * dilation + ho * stride : stride,
                v * dilation : v * dilation + wo * stride : stride,
            ]
    return cols.reshape(n, c, kh * kw, ho * wo)


def _col2im(gcols: np.ndarray, shape_padded, kh, kw, stride, dilation, ho, wo) -> np.ndarray:
    """Adjoint of _im2col: accumulate (N, C, K, Ho*Wo) back onto the padded plane."""
    n, c = gcols.shape[:2]
    gx = np.zeros((n, c) + shape_padded, dtype=gcols.dtype)
    g5 = gcols.reshape(n, c, kh * kw, ho, wo)
    for u in range(kh):
        for v in range(kw):
            gx[
                :,
                :,
                u * dilation : u * dilation + ho * stride : stride,
                v * dilation : v * dilation + wo * stride : stride,
            ] += g5[:, :, u * kw + v]
    return gx


def conv2d(
    x: Tensor,
    w: Tensor,
    b: Tensor,
    stride: int = 1,
    padding: int = 0,
    dilation: int = 1,
) -> Tensor:
    """Standard cross-correlation with zero padding.

    Differentiable w.r.t. input, weight, and bias.
    """
    n, c, h, wdt, co, kh, kw, ho, wo = _check_conv_shapes(
        x.data, w.data, b.data, stride, padding, dilation
    )
    if padding:
        xp = np.pad(x.data, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    else:
        xp = x.data
    cols = _im2col(xp, kh, kw, stride, dilation, ho, wo).reshape(n, c * kh * kw, ho * wo)
    w2d = w.data.reshape(co, c * kh * kw)
    out = np.matmul(w2d[None], cols) + b.data[None, :, None]
    out = out.reshape(n, co, ho, wo)

    def bwd(g):
        g2 = np.ascontiguousarray(g.reshape(n, co, ho * wo))
        gb = g2.sum(axis=(0, 2))
        gw = np.matmul(g2, cols.transpose(0, 2, 1)).sum(axis=0).reshape(w.data.shape)
        gcols = np.matmul(w2d.T[None], g2).reshape(n, c, kh * kw, ho * wo)
        gxp = _col2im(gcols, xp.shape[2:], kh, kw, stride, dilation, ho, wo)
        if padding:
            gx = gxp[:, :, padding : padding + h, padding : padding + wdt]
        else:
            gx = gxp
        return gx, gw, gb

    return _apply(out, (x, w, b), bwd)


def deform_conv2d(
    x: Tensor,
    w: Tensor,
    b: Tensor,
    offsets: Tensor,
    modulation: Tensor,
    stride: int = 1,
    padding: int = 0,
    dilation: int = 1,
) -> Tensor:
    """Modulated deformable convolution.

    Each kernel tap samples the zero-padded input plane at its regular
    grid position plus a learned (dy, dx) offset, via bilinear
    interpolation with coordinates clamped to the padded rectangle, and
    is scaled by its modulation scalar. With zero offsets and unit
    modulation this reduces exactly to :func:`conv2d`.

    ``offsets`` is (N, 2K, Ho, Wo) with channels (dy_0, dx_0, dy_1, ...)
    for taps in row-major kernel order; ``modulation`` is (N, K, Ho, Wo).
    The caller is responsible for squashing modulation into [0, 1].
    Differentiable w.r.t. input, weight, bias, offsets and modulation.
    """
    n, c, h, wdt, co, kh, kw, ho, wo = _check_conv_shapes(
        x.data, w.data, b.data, stride, padding, dilation
    )
    k = kh * kw
    if offsets.shape != (n, 2 * k, ho, wo):
        raise ShapeError(
            f"offsets shape {offsets.shape} != {(n, 2 * k, ho, wo)}"
        )
    if modulation.shape != (n, k, ho, wo):
        raise ShapeError(
            f"modulation shape {modulation.shape} != {(n, k, ho, wo)}"
        )
    dt = x.data.dtype
    if padding:
        xp = np.pad(x.data, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    else:
        xp = x.data
    hp, wp = xp.shape[2:]
    L = ho * wo

    # sample positions on the padded plane, per (n, k, l)
    base_y = (np.repeat(np.arange(kh), kw) * dilation)[None, :, None]
    base_x = (np.tile(np.arange(kw), kh) * dilation)[None, :, None]
    cell_y = (np.repeat(np.arange(ho), wo) * stride)[None, None, :]
    cell_x = (np.tile(np.arange(wo), ho) * stride)[None, None, :]
    off = offsets.data.reshape(n, k, 2, L)
    py = base_y + cell_y + off[:, :, 0].astype(np.float64)
    px = base_x + cell_x + off[:, :, 1].astype(np.float64)

    free_y = (py > 0.0) & (py < hp - 1)
    free_x = (px > 0.0) & (px < wp - 1)
    pyc = np.clip(py, 0.0, hp - 1)
    pxc = np.clip(px, 0.0, wp - 1)
    y0 = np.floor(pyc).astype(np.int64)
    x0 = np.floor(pxc).astype(np.int64)
    y1 = np.minimum(y0 + 1, hp - 1)
    x1 = np.minimum(x0 + 1, wp - 1)
    wy = (pyc - y0).astype(dt)
    wx = (pxc - x0).astype(dt)

    # gather from the NHWC-flattened plane: one contiguous row copy per corner
    xpf = np.ascontiguousarray(xp.transpose(0, 2, 3, 1)).reshape(n * hp * wp, c)
    row_n = np.arange(n)[:, None, None] * (hp * wp)
    r00 = (row_n + y0 * wp + x0).ravel()
    r01 = (row_n + y0 * wp + x1).ravel()
    r10 = (row_n + y1 * wp + x0).ravel()
    r11 = (row_n + y1 * wp + x1).ravel()
    # corners: (N, K, L, C)
    v00 = xpf[r00].reshape(n, k, L, c)
    v01 = xpf[r01].reshape(n, k, L, c)
    v10 = xpf[r10].reshape(n, k, L, c)
    v11 = xpf[r11].reshape(n, k, L, c)
    wy_ = wy[..., None]
    wx_ = wx[..., None]
    vals = (
        v00 * (1 - wy_) * (1 - wx_)
        + v01 * (1 - wy_) * wx_
        + v10 * wy_ * (1 - wx_)
        + v11 * wy_ * wx_
    )
    m = modulation.data.reshape(n, k, L)
    cols_nklc = vals * m[..., None]
    cols = np.ascontiguousarray(cols_nklc.transpose(0, 3, 1, 2)).reshape(n, c * k, L)

    w2d = w.data.reshape(co, c * k)
    out = (np.matmul(w2d[None], cols) + b.data[None, :, None]).reshape(n, co, ho, wo)

    def bwd(g):
        g2 = np.ascontiguousarray(g.reshape(n, co, L))
        gb = g2.sum(axis=(0, 2))
        gw = np.matmul(g2, cols.transpose(0, 2, 1)).sum(axis=0).reshape(w.data.shape)
        gcols = np.matmul(w2d.T[None], g2)  # (N, C*K, L)
        u = gcols.reshape(n, c, k, L).transpose(0, 2, 3, 1)  # (N, K, L, C)

        gmod = (u * vals).sum(axis=3).reshape(modulation.data.shape)
        um = u * m[..., None]

        # input gradient: scatter the four bilinear corners as row adds
        gxpf = np.zeros((n * hp * wp, c), dtype=dt)
        umf = um.reshape(-1, c)
        rows_all = np.concatenate([r00, r01, r10, r11])
        vals_all = np.concatenate([
            umf * ((1 - wy_) * (1 - wx_)).reshape(-1, 1),
            umf * ((1 - wy_) * wx_).reshape(-1, 1),
            umf * (wy_ * (1 - wx_)).reshape(-1, 1),
            umf * (wy_ * wx_).reshape(-1, 1),
        ])
        np.add.at(gxpf, rows_all, vals_all)
        gxp = gxpf.reshape(n, hp, wp, c).transpose(0, 3, 1, 2)
        if padding:
            gx = gxp[:, :, padding : padding + h, padding : padding + wdt]
        else:
            gx = gxp

        # offset gradients via the bilinear derivative, zero where clamped
        dvdy = (1 - wx_) * (v10 - v00) + wx_ * (v11 - v01)
        dvdx = (1 - wy_) * (v01 - v00) + wy_ * (v11 - v10)
        gpy = (um * dvdy).sum(axis=3) * free_y
        gpx = (um * dvdx).sum(axis=3) * free_x
        goff = np.stack([gpy, gpx], axis=2).reshape(offsets.data.shape).astype(dt)
        return gx, gw, gb, goff, gmod.astype(dt)

    return _apply(out, (x, w, b, offsets, modulation), bwd)
