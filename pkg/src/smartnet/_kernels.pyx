# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled im2col / col2im loops for the convolution operator.

Column layout is ``(C*k*k, N*Ho*Wo)`` with the row index ``(c*k + i)*k + j``
and the column index ``(n*Ho + y)*Wo + x``; the numpy fallback in
``_kernels_py`` produces the identical layout.
"""
import numpy as np
cimport numpy as cnp

ctypedef fused real:
    float
    double


cdef inline (Py_ssize_t, Py_ssize_t) _valid_range(
    Py_ssize_t j, Py_ssize_t padding, Py_ssize_t stride, Py_ssize_t width, Py_ssize_t out_w
) nogil:
    # output columns xx with 0 <= xx*stride + j - padding < width
    cdef Py_ssize_t lo = 0, hi
    if padding > j:
        lo = (padding - j + stride - 1) // stride
    hi = (width - 1 + padding - j) // stride + 1
    if hi > out_w:
        hi = out_w
    if hi < lo:
        hi = lo
    return lo, hi


def im2col(const real[:, :, :, ::1] x, int k, int stride, int padding):
    cdef Py_ssize_t n_img = x.shape[0], chans = x.shape[1]
    cdef Py_ssize_t height = x.shape[2], width = x.shape[3]
    cdef Py_ssize_t out_h = (height + 2 * padding - k) // stride + 1
    cdef Py_ssize_t out_w = (width + 2 * padding - k) // stride + 1
    cdef Py_ssize_t ncols = n_img * out_h * out_w
    dtype = np.float32 if real is float else np.float64
    cols_arr = np.zeros((chans * k * k, ncols), dtype=dtype)
    cdef real[:, ::1] cols = cols_arr
    cdef Py_ssize_t n, c, i, j, y, xx, row, col, iy, lo, hi
    for c in range(chans):
        for i in range(k):
            for j in range(k):
                row = (c * k + i) * k + j
                lo, hi = _valid_range(j, padding, stride, width, out_w)
                for n in range(n_img):
                    for y in range(out_h):
                        iy = y * stride + i - padding
                        if iy < 0 or iy >= height:
                            continue
                        col = (n * out_h + y) * out_w
                        for xx in range(lo, hi):
                            cols[row, col + xx] = x[n, c, iy, xx * stride + j - padding]
    return cols_arr


def col2im(const real[:, ::1] cols, tuple x_shape, int k, int stride, int padding):
    cdef Py_ssize_t n_img = x_shape[0], chans = x_shape[1]
    cdef Py_ssize_t height = x_shape[2], width = x_shape[3]
    cdef Py_ssize_t out_h = (height + 2 * padding - k) // stride + 1
    cdef Py_ssize_t out_w = (width + 2 * padding - k) // stride + 1
    dtype = np.float32 if real is float else np.float64
    out_arr = np.zeros((n_img, chans, height, width), dtype=dtype)
    cdef real[:, :, :, ::1] out = out_arr
    cdef Py_ssize_t n, c, i, j, y, xx, row, col, iy, lo, hi
    for c in range(chans):
        for i in range(k):
            for j in range(k):
                row = (c * k + i) * k + j
                lo, hi = _valid_range(j, padding, stride, width, out_w)
                for n in range(n_img):
                    for y in range(out_h):
                        iy = y * stride + i - padding
                        if iy < 0 or iy >= height:
                            continue
                        col = (n * out_h + y) * out_w
                        for xx in range(lo, hi):
                            out[n, c, iy, xx * stride + j - padding] += cols[row, col + xx]
    return out_arr
