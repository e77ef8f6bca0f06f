# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled im2col / col2im for 3x3, stride 1, padding 1 convolutions.

Column layout matches :func:`mdfsc.ndnum._im2col_numpy`:
``cols[b, ci*9 + kh*3 + kw, i*w + j] = x[b, ci, i + kh - 1, j + kw - 1]``
(zero outside the image).
"""

import numpy as np
cimport numpy as cnp

cnp.import_array()

ctypedef fused real:
    float
    double


cdef void _im2col(const real[:, :, :, ::1] x, real[:, :, ::1] out) noexcept nogil:
    cdef Py_ssize_t n = x.shape[0], c = x.shape[1], h = x.shape[2], w = x.shape[3]
    cdef Py_ssize_t b, ci, kh, kw, i, j, si, row, j0, j1
    for b in range(n):
        for ci in range(c):
            for kh in range(3):
                for kw in range(3):
                    row = ci * 9 + kh * 3 + kw
                    j0 = 1 if kw == 0 else 0
                    j1 = w - 1 if kw == 2 else w
                    for i in range(h):
                        si = i + kh - 1
                        if si < 0 or si >= h:
                            for j in range(w):
                                out[b, row, i * w + j] = 0
                            continue
                        if j0 == 1:
                            out[b, row, i * w] = 0
                        if j1 == w - 1:
                            out[b, row, i * w + w - 1] = 0
                        for j in range(j0, j1):
                            out[b, row, i * w + j] = x[b, ci, si, j + kw - 1]


cdef void _col2im(const real[:, :, ::1] cols, real[:, :, :, ::1] dx) noexcept nogil:
    cdef Py_ssize_t n = dx.shape[0], c = dx.shape[1], h = dx.shape[2], w = dx.shape[3]
    cdef Py_ssize_t b, ci, kh, kw, i, j, si, row, j0, j1
    for b in range(n):
        for ci in range(c):
            for kh in range(3):
                for kw in range(3):
                    row = ci * 9 + kh * 3 + kw
                    j0 = 1 if kw == 0 else 0
                    j1 = w - 1 if kw == 2 else w
                    for i in range(h):
                        si = i + kh - 1
                        if si < 0 or si >= h:
                            continue
                        for j in range(j0, j1):
                            dx[b, ci, si, j + kw - 1] += cols[b, row, i * w + j]


def im2col(x):
    x = np.ascontiguousarray(x)
    n, c, h, w = x.shape
    out = np.empty((n, c * 9, h * w), dtype=x.dtype)
    _dispatch_im2col(x, out)
    return out


cdef _dispatch_im2col(x, out):
    cdef float[:, :, :, ::1] xf
    cdef float[:, :, ::1] of
    cdef double[:, :, :, ::1] xd
    cdef double[:, :, ::1] od
    if x.dtype == np.float32:
        xf = x
        of = out
        with nogil:
            _im2col(xf, of)
    elif x.dtype == np.float64:
        xd = x
        od = out
        with nogil:
            _im2col(xd, od)
    else:
        raise TypeError(f"unsupported dtype {x.dtype}")


def col2im(cols, shape):
    """Scatter-add ``cols`` (n, c*9, h*w) back to an (n, c, h, w) gradient."""
    cols = np.ascontiguousarray(cols)
    dx = np.zeros(shape, dtype=cols.dtype)
    cdef float[:, :, ::1] cf
    cdef float[:, :, :, ::1] df
    cdef double[:, :, ::1] cd
    cdef double[:, :, :, ::1] dd
    if cols.dtype == np.float32:
        cf = cols
        df = dx
        with nogil:
            _col2im(cf, df)
    elif cols.dtype == np.float64:
        cd = cols
        dd = dx
        with nogil:
            _col2im(cd, dd)
    else:
        raise TypeError(f"unsupported dtype {cols.dtype}")
    return dx
