"""Pure-numpy kernels. Same signatures and results as the compiled ``_ckernels``.

All convolutions here use the 3x3 envelope: output cell (oy, ox) is centred on
padded input coordinate (oy*stride + 1, ox*stride + 1).
"""

import numpy as np


def out_size(size, stride, pad, kernel=3):
    return (size + 2 * pad - kernel) // stride + 1


def gather_taps(x, offsets, stride, pad):
    """Sample ``x`` (N, C, H, W) at each tap offset -> (N, C, T, Ho, Wo)."""
    n, c, h, w = x.shape
    ho, wo = out_size(h, stride, pad), out_size(w, stride, pad)
    xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad))) if pad else x
    cols = np.empty((n, c, len(offsets), ho, wo), dtype=x.dtype)
    for t, (dy, dx) in enumerate(offsets):
        y0, x0 = 1 + dy, 1 + dx
        cols[:, :, t] = xp[:, :, y0:y0 + (ho - 1) * stride + 1:stride,
                           x0:x0 + (wo - 1) * stride + 1:stride]
    return cols


def scatter_taps(dcols, offsets, stride, pad, h, w):
    """Adjoint of :func:`gather_taps`; accumulates taps in order."""
    n, c, _, ho, wo = dcols.shape
    dxp = np.zeros((n, c, h + 2 * pad, w + 2 * pad), dtype=dcols.dtype)
    for t, (dy, dx) in enumerate(offsets):
        y0, x0 = 1 + dy, 1 + dx
        dxp[:, :, y0:y0 + (ho - 1) * stride + 1:stride,
            x0:x0 + (wo - 1) * stride + 1:stride] += dcols[:, :, t]
    if pad:
        return np.ascontiguousarray(dxp[:, :, pad:pad + h, pad:pad + w])
    return dxp


def maxpool_forward(x, kernel=3, stride=2, pad=1):
    n, c, h, w = x.shape
    ho, wo = out_size(h, stride, pad, kernel), out_size(w, stride, pad, kernel)
    xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)), constant_values=-np.inf)
    windows = np.stack([
        xp[:, :, ky:ky + (ho - 1) * stride + 1:stride, kx:kx + (wo - 1) * stride + 1:stride]
        for ky in range(kernel) for kx in range(kernel)
    ])
    idx = windows.argmax(axis=0).astype(np.uint8)
    out = np.take_along_axis(windows, idx[None].astype(np.intp), axis=0)[0]
    return np.ascontiguousarray(out), idx


def maxpool_backward(dout, idx, h, w, kernel=3, stride=2, pad=1):
    n, c, ho, wo = dout.shape
    dxp = np.zeros((n, c, h + 2 * pad, w + 2 * pad), dtype=dout.dtype)
    k = 0
    for ky in range(kernel):
        for kx in range(kernel):
            dxp[:, :, ky:ky + (ho - 1) * stride + 1:stride,
                kx:kx + (wo - 1) * stride + 1:stride] += np.where(idx == k, dout, 0)
            k += 1
    return np.ascontiguousarray(dxp[:, :, pad:pad + h, pad:pad + w])
