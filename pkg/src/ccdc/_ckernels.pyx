# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True
"""Compiled tap gather/scatter and 3x3 max-pool kernels.

Loop order matches ``_pykernels`` tap-by-tap so floating-point accumulation,
and therefore every result, is bit-identical between the two backends.
"""

import numpy as np
cimport numpy as cnp
from cython cimport floating

cnp.import_array()


def out_size(Py_ssize_t size, Py_ssize_t stride, Py_ssize_t pad, Py_ssize_t kernel=3):
    return (size + 2 * pad - kernel) // stride + 1


cdef inline void _col_range(Py_ssize_t off, Py_ssize_t w, Py_ssize_t wo, Py_ssize_t stride,
                            Py_ssize_t *lo, Py_ssize_t *hi) noexcept nogil:
    # output columns whose input column ox*stride + off lies in [0, w)
    cdef Py_ssize_t a = 0, b
    if off < 0:
        a = (-off + stride - 1) // stride
    b = (w - 1 - off) // stride + 1 if w - 1 - off >= 0 else 0
    if b > wo:
        b = wo
    if a > b:
        a = b
    lo[0] = a
    hi[0] = b


cdef void _gather(floating[:, :, :, ::1] x, floating[:, :, :, :, ::1] cols,
                  long[:, ::1] offs, Py_ssize_t stride, Py_ssize_t pad) noexcept nogil:
    cdef Py_ssize_t n = x.shape[0], c = x.shape[1], h = x.shape[2], w = x.shape[3]
    cdef Py_ssize_t T = offs.shape[0], ho = cols.shape[3], wo = cols.shape[4]
    cdef Py_ssize_t b, ch, t, oy, ox, iy, xoff, lo, hi
    cdef floating *dst
    cdef floating *src
    for t in range(T):
        xoff = 1 - pad + offs[t, 1]
        _col_range(xoff, w, wo, stride, &lo, &hi)
        for b in range(n):
            for ch in range(c):
                for oy in range(ho):
                    iy = oy * stride + 1 - pad + offs[t, 0]
                    dst = &cols[b, ch, t, oy, 0]
                    if iy < 0 or iy >= h:
                        for ox in range(wo):
                            dst[ox] = 0
                        continue
                    src = &x[b, ch, iy, 0]
                    for ox in range(lo):
                        dst[ox] = 0
                    if stride == 1:
                        for ox in range(lo, hi):
                            dst[ox] = src[ox + xoff]
                    else:
                        for ox in range(lo, hi):
                            dst[ox] = src[ox * stride + xoff]
                    for ox in range(hi, wo):
                        dst[ox] = 0


cdef void _scatter(floating[:, :, :, :, ::1] dcols, floating[:, :, :, ::1] dx_,
                   long[:, ::1] offs, Py_ssize_t stride, Py_ssize_t pad) noexcept nogil:
    cdef Py_ssize_t n = dcols.shape[0], c = dcols.shape[1], T = dcols.shape[2]
    cdef Py_ssize_t ho = dcols.shape[3], wo = dcols.shape[4]
    cdef Py_ssize_t h = dx_.shape[2], w = dx_.shape[3]
    cdef Py_ssize_t b, ch, t, oy, ox, iy, xoff, lo, hi
    cdef floating *dst
    cdef floating *src
    # taps outermost: each element receives its contributions in tap order
    for t in range(T):
        xoff = 1 - pad + offs[t, 1]
        _col_range(xoff, w, wo, stride, &lo, &hi)
        for b in range(n):
            for ch in range(c):
                for oy in range(ho):
                    iy = oy * stride + 1 - pad + offs[t, 0]
                    if iy < 0 or iy >= h:
                        continue
                    dst = &dx_[b, ch, iy, 0]
                    src = &dcols[b, ch, t, oy, 0]
                    if stride == 1:
                        for ox in range(lo, hi):
                            dst[ox + xoff] += src[ox]
                    else:
                        for ox in range(lo, hi):
                            dst[ox * stride + xoff] += src[ox]


def gather_taps(x, offsets, Py_ssize_t stride, Py_ssize_t pad):
    x = np.ascontiguousarray(x)
    cdef long[:, ::1] offs = np.ascontiguousarray(offsets, dtype=np.int_).reshape(-1, 2)
    n, c, h, w = x.shape
    ho, wo = out_size(h, stride, pad), out_size(w, stride, pad)
    cols = np.empty((n, c, offs.shape[0], ho, wo), dtype=x.dtype)
    if x.dtype == np.float32:
        _gather[float](x, cols, offs, stride, pad)
    elif x.dtype == np.float64:
        _gather[double](x, cols, offs, stride, pad)
    else:
        raise TypeError(f"unsupported dtype {x.dtype}")
    return cols


def scatter_taps(dcols, offsets, Py_ssize_t stride, Py_ssize_t pad, Py_ssize_t h, Py_ssize_t w):
    dcols = np.ascontiguousarray(dcols)
    cdef long[:, ::1] offs = np.ascontiguousarray(offsets, dtype=np.int_).reshape(-1, 2)
    n, c = dcols.shape[0], dcols.shape[1]
    dx = np.zeros((n, c, h, w), dtype=dcols.dtype)
    if dcols.dtype == np.float32:
        _scatter[float](dcols, dx, offs, stride, pad)
    elif dcols.dtype == np.float64:
        _scatter[double](dcols, dx, offs, stride, pad)
    else:
        raise TypeError(f"unsupported dtype {dcols.dtype}")
    return dx


cdef void _pool_fwd(floating[:, :, :, ::1] x, floating[:, :, :, ::1] out,
                    unsigned char[:, :, :, ::1] idx, Py_ssize_t kernel,
                    Py_ssize_t stride, Py_ssize_t pad) noexcept nogil:
    cdef Py_ssize_t n = x.shape[0], c = x.shape[1], h = x.shape[2], w = x.shape[3]
    cdef Py_ssize_t ho = out.shape[2], wo = out.shape[3]
    cdef Py_ssize_t b, ch, oy, ox, ky, kx, iy, ix, k, best_k
    cdef floating best, v
    cdef bint have
    for b in range(n):
        for ch in range(c):
            for oy in range(ho):
                for ox in range(wo):
                    have = False
                    best = 0
                    best_k = 0
                    k = 0
                    for ky in range(kernel):
                        iy = oy * stride - pad + ky
                        for kx in range(kernel):
                            ix = ox * stride - pad + kx
                            if 0 <= iy < h and 0 <= ix < w:
                                v = x[b, ch, iy, ix]
                                # strict > keeps the first maximum, as argmax does
                                if not have or v > best:
                                    best = v
                                    best_k = k
                                    have = True
                            k += 1
                    out[b, ch, oy, ox] = best
                    idx[b, ch, oy, ox] = <unsigned char>best_k


cdef void _pool_bwd(floating[:, :, :, ::1] dout, unsigned char[:, :, :, ::1] idx,
                    floating[:, :, :, ::1] dx, Py_ssize_t kernel,
                    Py_ssize_t stride, Py_ssize_t pad) noexcept nogil:
    cdef Py_ssize_t n = dout.shape[0], c = dout.shape[1], ho = dout.shape[2], wo = dout.shape[3]
    cdef Py_ssize_t b, ch, oy, ox, ky, kx, k
    # tap-major loop order mirrors the numpy fallback
    for b in range(n):
        for ch in range(c):
            k = 0
            for ky in range(kernel):
                for kx in range(kernel):
                    for oy in range(ho):
                        for ox in range(wo):
                            if idx[b, ch, oy, ox] == k:
                                dx[b, ch, oy * stride - pad + ky, ox * stride - pad + kx] += dout[b, ch, oy, ox]
                    k += 1


def maxpool_forward(x, Py_ssize_t kernel=3, Py_ssize_t stride=2, Py_ssize_t pad=1):
    x = np.ascontiguousarray(x)
    n, c, h, w = x.shape
    ho, wo = out_size(h, stride, pad, kernel), out_size(w, stride, pad, kernel)
    out = np.empty((n, c, ho, wo), dtype=x.dtype)
    idx = np.empty((n, c, ho, wo), dtype=np.uint8)
    if x.dtype == np.float32:
        _pool_fwd[float](x, out, idx, kernel, stride, pad)
    elif x.dtype == np.float64:
        _pool_fwd[double](x, out, idx, kernel, stride, pad)
    else:
        raise TypeError(f"unsupported dtype {x.dtype}")
    return out, idx


def maxpool_backward(dout, idx, Py_ssize_t h, Py_ssize_t w, Py_ssize_t kernel=3,
                     Py_ssize_t stride=2, Py_ssize_t pad=1):
    dout = np.ascontiguousarray(dout)
    idx = np.ascontiguousarray(idx, dtype=np.uint8)
    n, c = dout.shape[0], dout.shape[1]
    dx = np.zeros((n, c, h, w), dtype=dout.dtype)
    if dout.dtype == np.float32:
        _pool_bwd[float](dout, idx, dx, kernel, stride, pad)
    elif dout.dtype == np.float64:
        _pool_bwd[double](dout, idx, dx, kernel, stride, pad)
    else:
        raise TypeError(f"unsupported dtype {dout.dtype}")
    return dx
