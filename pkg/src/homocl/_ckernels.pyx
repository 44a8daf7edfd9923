# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True
"""Compiled versions of the hot kernels in ``_kernels_py``."""

import numpy as np
cimport numpy as cnp
from libc.math cimport floor

cnp.import_array()

ctypedef fused real:
    float
    double


def im2col3x3(real[:, :, :, ::1] x):
    cdef Py_ssize_t n = x.shape[0], h = x.shape[1], w = x.shape[2], c = x.shape[3]
    dtype = np.float32 if real is float else np.float64
    out = np.zeros((n * h * w, 9 * c), dtype=dtype)
    cdef real[:, ::1] cols = out
    cdef Py_ssize_t i, y, xx, dy, dx, ch, row, yy, xs, base
    with nogil:
        for i in range(n):
            for y in range(h):
                for xx in range(w):
                    row = (i * h + y) * w + xx
                    for dy in range(3):
                        yy = y + dy - 1
                        if yy < 0 or yy >= h:
                            continue
                        for dx in range(3):
                            xs = xx + dx - 1
                            if xs < 0 or xs >= w:
                                continue
                            base = (dy * 3 + dx) * c
                            for ch in range(c):
                                cols[row, base + ch] = x[i, yy, xs, ch]
    return out


def col2im3x3(cols_in, shape):
    cdef Py_ssize_t n = shape[0], h = shape[1], w = shape[2], c = shape[3]
    if cols_in.dtype == np.float32:
        return _col2im[float](np.ascontiguousarray(cols_in).reshape(n * h * w, 9 * c), n, h, w, c)
    return _col2im[double](np.ascontiguousarray(cols_in, dtype=np.float64).reshape(n * h * w, 9 * c), n, h, w, c)


cdef object _col2im(real[:, ::1] cols, Py_ssize_t n, Py_ssize_t h, Py_ssize_t w, Py_ssize_t c):
    dtype = np.float32 if real is float else np.float64
    out = np.zeros((n, h, w, c), dtype=dtype)
    cdef real[:, :, :, ::1] x = out
    cdef Py_ssize_t i, y, xx, dy, dx, ch, row, yy, xs, base
    with nogil:
        for i in range(n):
            for y in range(h):
                for xx in range(w):
                    row = (i * h + y) * w + xx
                    for dy in range(3):
                        yy = y + dy - 1
                        if yy < 0 or yy >= h:
                            continue
                        for dx in range(3):
                            xs = xx + dx - 1
                            if xs < 0 or xs >= w:
                                continue
                            base = (dy * 3 + dx) * c
                            for ch in range(c):
                                x[i, yy, xs, ch] += cols[row, base + ch]
    return out


def crop_resize(real[:, :, :, ::1] images, double[:, ::1] boxes, Py_ssize_t out_size):
    cdef Py_ssize_t n = images.shape[0], h = images.shape[1], w = images.shape[2], c = images.shape[3]
    dtype = np.float32 if real is float else np.float64
    result = np.empty((n, out_size, out_size, c), dtype=dtype)
    cdef real[:, :, :, ::1] out = result
    cdef Py_ssize_t i, oy, ox, ch, y0, x0, y1, x1
    cdef double t, ys, xs, wy, wx, v
    with nogil:
        for i in range(n):
            for oy in range(out_size):
                t = (oy + 0.5) / out_size
                ys = boxes[i, 0] + t * boxes[i, 2] - 0.5
                if ys < 0.0:
                    ys = 0.0
                if ys > h - 1:
                    ys = h - 1
                y0 = <Py_ssize_t>floor(ys)
                y1 = y0 + 1 if y0 + 1 < h else h - 1
                wy = ys - y0
                for ox in range(out_size):
                    t = (ox + 0.5) / out_size
                    xs = boxes[i, 1] + t * boxes[i, 3] - 0.5
                    if xs < 0.0:
                        xs = 0.0
                    if xs > w - 1:
                        xs = w - 1
                    x0 = <Py_ssize_t>floor(xs)
                    x1 = x0 + 1 if x0 + 1 < w else w - 1
                    wx = xs - x0
                    for ch in range(c):
                        v = ((images[i, y0, x0, ch] * (1.0 - wx) + images[i, y0, x1, ch] * wx) * (1.0 - wy)
                             + (images[i, y1, x0, ch] * (1.0 - wx) + images[i, y1, x1, ch] * wx) * wy)
                        out[i, oy, ox, ch] = <real>v
    return result
