"""Forward/backward tensor operations: conv3d, pooling, PReLU.

All convolutions are cross-correlations over ``(B, C, X, Y, Z)`` arrays.
The hot path lowers to one batched GEMM per call: kernel taps are
gathered into a column array (taps are written as contiguous slices, so
the gather is a handful of fast copies), then contracted against the
kernel with ``matmul``.
"""

from __future__ import annotations

import numpy as np


def _triple(v) -> tuple[int, int, int]:
    if np.isscalar(v):
        return (int(v),) * 3
    t = tuple(int(x) for x in v)
    if len(t) != 3:
        raise ValueError(f"expected scalar or 3 per-axis values, got {v!r}")
    return t


def _out_extent(n: int, k: int, s: int, d: int, p: int, axis: int) -> int:
    out = (n + 2 * p - d * (k - 1) - 1) // s + 1
    if out < 1:
        raise ValueError(
            f"axis {axis}: input extent {n} too small for kernel {k} "
            f"(stride {s}, dilation {d}, padding {p})"
        )
    return out


def _im2col(xp: np.ndarray, kernel, stride, dilation, out_sp) -> np.ndarray:
    """Column array (B, C, kx, ky, kz, ox, oy, oz) from a padded input."""
    B, C = xp.shape[:2]
    kx, ky, kz = kernel
    sx, sy, sz = stride
    dx, dy, dz = dilation
    ox, oy, oz = out_sp
    cols = np.empty((B, C, kx, ky, kz, ox, oy, oz), dtype=xp.dtype)
    for i in range(kx):
        for j in range(ky):
            for l in range(kz):
                cols[:, :, i, j, l] = xp[
                    :, :,
                    i * dx: i * dx + (ox - 1) * sx + 1: sx,
                    j * dy: j * dy + (oy - 1) * sy + 1: sy,
                    l * dz: l * dz + (oz - 1) * sz + 1: sz,
                ]
    return cols


def _check_conv_args(x, w, stride, dilation, padding, allow_even=False):
    if x.ndim != 5 or w.ndim != 5:
        raise ValueError(f"conv3d needs 5D x and w, got {x.shape} and {w.shape}")
    if w.shape[1] != x.shape[1]:
        raise ValueError(
            f"channel axis: input has {x.shape[1]} channels, kernel expects {w.shape[1]}"
        )
    if not allow_even:
        for axis, k in enumerate(w.shape[2:]):
            if k % 2 == 0:
                raise ValueError(f"axis {axis}: kernel extent {k} must be odd")
    st, di, pa = _triple(stride), _triple(dilation), _triple(padding)
    out_sp = tuple(
        _out_extent(x.shape[2 + a], w.shape[2 + a], st[a], di[a], pa[a], a)
        for a in range(3)
    )
    return st, di, pa, out_sp


def _pad(x, pa):
    if pa == (0, 0, 0):
        return x
    px, py, pz = pa
    B, C, X, Y, Z = x.shape
    out = np.zeros((B, C, X + 2 * px, Y + 2 * py, Z + 2 * pz), dtype=x.dtype)
    out[:, :, px:px + X, py:py + Y, pz:pz + Z] = x
    return out


def conv3d_fwd(x, w, bias=None, stride=1, dilation=1, padding=0,
               _allow_even=False) -> np.ndarray:
    """Cross-correlation of x (B,Ci,X,Y,Z) with kernel w (Co,Ci,kx,ky,kz)."""
    st, di, pa, out_sp = _check_conv_args(x, w, stride, dilation, padding, _allow_even)
    B = x.shape[0]
    Co = w.shape[0]
    kprod = int(np.prod(w.shape[1:]))

    if w.shape[2:] == (1, 1, 1) and st == (1, 1, 1) and pa == (0, 0, 0):
        # pointwise fast path, no column gather needed
        n = int(np.prod(x.shape[2:]))
        out = np.matmul(w.reshape(Co, -1), x.reshape(B, x.shape[1], n))
    else:
        cols = _im2col(_pad(x, pa), w.shape[2:], st, di, out_sp)
        out = np.matmul(w.reshape(Co, kprod), cols.reshape(B, kprod, -1))
    out = out.reshape(B, Co, *out_sp)
    if bias is not None:
        out = out + np.asarray(bias).reshape(1, Co, 1, 1, 1)
    return out


def conv3d_bwd(grad_out, x, w, bias=None, stride=1, dilation=1, padding=0,
               _allow_even=False, _only_weight=False):
    """Gradients of conv3d_fwd: (grad_x, grad_w, grad_bias).

    grad_bias is None when the forward had no bias; grad_x is None when
    ``_only_weight`` is set (used by the transposed-convolution layer).
    """
    st, di, pa, out_sp = _check_conv_args(x, w, stride, dilation, padding, _allow_even)
    if grad_out.shape != (x.shape[0], w.shape[0]) + out_sp:
        raise ValueError(
            f"grad_out shape {grad_out.shape} does not match forward output "
            f"{(x.shape[0], w.shape[0]) + out_sp}"
        )
    B = x.shape[0]
    Co = w.shape[0]
    kprod = int(np.prod(w.shape[1:]))
    n = int(np.prod(out_sp))
    g2 = grad_out.reshape(B, Co, n)

    grad_bias = grad_out.sum(axis=(0, 2, 3, 4)) if bias is not None else None

    if w.shape[2:] == (1, 1, 1) and st == (1, 1, 1) and pa == (0, 0, 0):
        x2 = x.reshape(B, x.shape[1], n)
        grad_w = np.matmul(g2, x2.transpose(0, 2, 1)).sum(axis=0).reshape(w.shape)
        grad_x = np.matmul(w.reshape(Co, -1).T, g2).reshape(x.shape)
        return grad_x, grad_w, grad_bias

    xp = _pad(x, pa)
    cols = _im2col(xp, w.shape[2:], st, di, out_sp)
    grad_w = np.matmul(g2, cols.reshape(B, kprod, n).transpose(0, 2, 1))
    grad_w = grad_w.sum(axis=0).reshape(w.shape)
    if _only_weight:
        return None, grad_w, grad_bias

    full_pad = tuple(di[a] * (w.shape[2 + a] - 1) - pa[a] for a in range(3))
    if st == (1, 1, 1) and min(full_pad) >= 0:
        # stride-1 input gradient is one correlation with the flipped,
        # channel-transposed kernel; much cheaper than scatter-adds
        wt = np.ascontiguousarray(
            w[:, :, ::-1, ::-1, ::-1].transpose(1, 0, 2, 3, 4))
        grad_x = conv3d_fwd(grad_out, wt, None, 1, di, full_pad, _allow_even=True)
        return grad_x, grad_w, grad_bias

    g_taps = np.matmul(w.reshape(Co, kprod).T, g2)  # (B, Ci*k^3, n)
    g_taps = g_taps.reshape((B,) + w.shape[1:] + out_sp)
    grad_xp = np.zeros_like(xp)
    kx, ky, kz = w.shape[2:]
    sx, sy, sz = st
    dx, dy, dz = di
    ox, oy, oz = out_sp
    for i in range(kx):
        for j in range(ky):
            for l in range(kz):
                grad_xp[
                    :, :,
                    i * dx: i * dx + (ox - 1) * sx + 1: sx,
                    j * dy: j * dy + (oy - 1) * sy + 1: sy,
                    l * dz: l * dz + (oz - 1) * sz + 1: sz,
                ] += g_taps[:, :, i, j, l]
    px, py, pz = pa
    grad_x = grad_xp[
        :, :,
        px: px + x.shape[2],
        py: py + x.shape[3],
        pz: pz + x.shape[4],
    ]
    return np.ascontiguousarray(grad_x), grad_w, grad_bias


def conv3d_input_grad(y, w, in_spatial, stride=2):
    """Transposed convolution: scatters y taps back to an input-sized grid.

    This is the grad-of-input map of a stride-``stride`` convolution with
    kernel w (Co,Ci,kx,ky,kz) viewed as a forward op from Co channels to
    Ci channels. Kernel extents may be even here (2x2x2 is the usual
    upsampling kernel).
    """
    st = _triple(stride)
    B, Co = y.shape[:2]
    if w.shape[0] != Co:
        raise ValueError(f"channel axis: input has {Co}, kernel expects {w.shape[0]}")
    kprod = int(np.prod(w.shape[1:]))
    n = int(np.prod(y.shape[2:]))
    g_taps = np.matmul(w.reshape(Co, kprod).T, y.reshape(B, Co, n))
    g_taps = g_taps.reshape((B,) + w.shape[1:] + y.shape[2:])
    out = np.zeros((B, w.shape[1]) + tuple(in_spatial), dtype=y.dtype)
    kx, ky, kz = w.shape[2:]
    sx, sy, sz = st
    ox, oy, oz = y.shape[2:]
    for i in range(kx):
        for j in range(ky):
            for l in range(kz):
                out[
                    :, :,
                    i: i + (ox - 1) * sx + 1: sx,
                    j: j + (oy - 1) * sy + 1: sy,
                    l: l + (oz - 1) * sz + 1: sz,
                ] += g_taps[:, :, i, j, l]
    return out


def _windows(x, window):
    B, C, X, Y, Z = x.shape
    wx, wy, wz = window
    if X % wx or Y % wy or Z % wz:
        raise ValueError(
            f"spatial extents {(X, Y, Z)} not divisible by window {window}"
        )
    ox, oy, oz = X // wx, Y // wy, Z // wz
    r = x.reshape(B, C, ox, wx, oy, wy, oz, wz)
    r = r.transpose(0, 1, 2, 4, 6, 3, 5, 7).reshape(B, C, ox, oy, oz, wx * wy * wz)
    return r, (ox, oy, oz)


def pool3d(x, kind="max", window=2, stride=2):
    """Non-overlapping max or average pooling.

    Max pooling also returns per-window argmax positions as linear
    indices into the input's (X, Y, Z) grid; average pooling returns
    ``None`` for the indices.
    """
    win = _triple(window)
    if _triple(stride) != win:
        raise ValueError("pool3d supports non-overlapping pooling (stride == window)")
    r, out_sp = _windows(x, win)
    if kind == "avg":
        return r.mean(axis=-1), None
    if kind != "max":
        raise ValueError(f"unknown pooling kind {kind!r}")
    flat_arg = r.argmax(axis=-1)
    out = np.take_along_axis(r, flat_arg[..., None], axis=-1)[..., 0]

    wx, wy, wz = win
    ai = flat_arg // (wy * wz)
    aj = (flat_arg // wz) % wy
    ak = flat_arg % wz
    ox, oy, oz = out_sp
    gi = np.arange(ox)[:, None, None] * wx + ai
    gj = np.arange(oy)[None, :, None] * wy + aj
    gk = np.arange(oz)[None, None, :] * wz + ak
    indices = (gi * x.shape[3] + gj) * x.shape[4] + gk
    return out, indices.astype(np.int64)


def pool3d_bwd(grad_out, x_shape, kind="max", window=2, indices=None):
    """Gradient of pool3d with respect to its input."""
    win = _triple(window)
    B, C = x_shape[:2]
    if kind == "max":
        if indices is None:
            raise ValueError("max pooling backward needs the forward indices")
        return unpool3d(grad_out, indices, x_shape[2:])
    wx, wy, wz = win
    ox, oy, oz = grad_out.shape[2:]
    g = grad_out / (wx * wy * wz)
    g = np.broadcast_to(
        g[:, :, :, None, :, None, :, None], (B, C, ox, wx, oy, wy, oz, wz)
    )
    return g.reshape(B, C, ox * wx, oy * wy, oz * wz).copy()


def unpool3d(x, indices, out_spatial):
    """Scatter pooled values back to recorded argmax positions, zeros elsewhere."""
    B, C = x.shape[:2]
    n_out = int(np.prod(out_spatial))
    idx = indices.reshape(B, C, -1)
    if idx.shape != x.reshape(B, C, -1).shape:
        raise ValueError(f"indices shape {indices.shape} does not match x {x.shape}")
    if idx.min() < 0 or idx.max() >= n_out:
        raise ValueError(
            f"unpool index out of range for output spatial size {tuple(out_spatial)}"
        )
    out = np.zeros((B, C, n_out), dtype=x.dtype)
    np.put_along_axis(out, idx, x.reshape(B, C, -1), axis=2)
    return out.reshape(B, C, *out_spatial)


def unpool3d_bwd(grad_out, indices, in_spatial):
    """Gradient of unpool3d: gather at the recorded positions."""
    B, C = grad_out.shape[:2]
    g = grad_out.reshape(B, C, -1)
    taken = np.take_along_axis(g, indices.reshape(B, C, -1), axis=2)
    return taken.reshape(B, C, *in_spatial)


def prelu_fwd(x, slope):
    """max(x, 0) + slope * min(x, 0); slope may be scalar or per-channel (C,)."""
    s = _slope_view(x, slope)
    return np.where(x >= 0, x, s * x)


def prelu_bwd(grad_out, x, slope):
    """Returns (grad_x, grad_slope); grad_slope matches the slope's shape."""
    s = _slope_view(x, slope)
    neg = x < 0
    grad_x = np.where(neg, s * grad_out, grad_out)
    contrib = grad_out * x * neg
    if np.isscalar(slope) or np.asarray(slope).ndim == 0:
        grad_slope = contrib.sum()
    else:
        axes = (0,) + tuple(range(2, x.ndim))
        grad_slope = contrib.sum(axis=axes)
    return grad_x, grad_slope


def _slope_view(x, slope):
    s = np.asarray(slope, dtype=x.dtype)
    if s.ndim == 0:
        return s
    if s.shape != (x.shape[1],):
        raise ValueError(f"slope shape {s.shape} is neither scalar nor (C,)")
    return s.reshape((1, -1) + (1,) * (x.ndim - 2))
