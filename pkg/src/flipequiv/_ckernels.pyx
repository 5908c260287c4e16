# cython: language_level=3
"""Compiled inner loops for patch extraction and max pooling.

Every function here has a numpy twin in ``_pykernels`` with the same
signature; ``flipequiv.kernels`` picks one at import time.  Inputs are
already padded, C-contiguous float64 arrays.
"""
import numpy as np

cimport numpy as cnp
from libc.math cimport INFINITY

cnp.import_array()


def im2col(const double[:, :, :, ::1] xp, Py_ssize_t k, Py_ssize_t stride,
           Py_ssize_t ho, Py_ssize_t wo):
    """Unfold ``xp`` into rows of length C*k*k, one row per (n, oh, ow)."""
    cdef Py_ssize_t n_img = xp.shape[0], c_in = xp.shape[1]
    cdef Py_ssize_t ncol = c_in * k * k
    cols_arr = np.empty((n_img * ho * wo, ncol), dtype=np.float64)
    cdef double[:, ::1] cols = cols_arr
    cdef Py_ssize_t n, c, oh, ow, ki, kj, row, col, h0, w0
    with nogil:
        for n in range(n_img):
            for oh in range(ho):
                h0 = oh * stride
                for ow in range(wo):
                    w0 = ow * stride
                    row = (n * ho + oh) * wo + ow
                    col = 0
                    for c in range(c_in):
                        for ki in range(k):
                            for kj in range(k):
                                cols[row, col] = xp[n, c, h0 + ki, w0 + kj]
                                col += 1
    return cols_arr


def col2im(const double[:, ::1] cols, Py_ssize_t n_img, Py_ssize_t c_in,
           Py_ssize_t hp, Py_ssize_t wp, Py_ssize_t k, Py_ssize_t stride,
           Py_ssize_t ho, Py_ssize_t wo):
    """Adjoint of :func:`im2col`: scatter-add rows back onto the padded grid."""
    out_arr = np.zeros((n_img, c_in, hp, wp), dtype=np.float64)
    cdef double[:, :, :, ::1] out = out_arr
    cdef Py_ssize_t n, c, oh, ow, ki, kj, row, col, h0, w0
    with nogil:
        for n in range(n_img):
            for oh in range(ho):
                h0 = oh * stride
                for ow in range(wo):
                    w0 = ow * stride
                    row = (n * ho + oh) * wo + ow
                    col = 0
                    for c in range(c_in):
                        for ki in range(k):
                            for kj in range(k):
                                out[n, c, h0 + ki, w0 + kj] += cols[row, col]
                                col += 1
    return out_arr


def maxpool_forward(const double[:, :, :, ::1] xp, Py_ssize_t k,
                    Py_ssize_t stride, Py_ssize_t ho, Py_ssize_t wo):
    """Windowed max; ``argmax`` holds the flat index into the padded plane.

    Windows are scanned row-major with a strict comparison, so ties go to
    the lowest flat index.
    """
    cdef Py_ssize_t n_img = xp.shape[0], c_in = xp.shape[1], wp = xp.shape[3]
    out_arr = np.empty((n_img, c_in, ho, wo), dtype=np.float64)
    arg_arr = np.empty((n_img, c_in, ho, wo), dtype=np.int64)
    cdef double[:, :, :, ::1] out = out_arr
    cdef long long[:, :, :, ::1] arg = arg_arr
    cdef Py_ssize_t n, c, oh, ow, ki, kj, h0, w0, best_i
    cdef double best, v
    with nogil:
        for n in range(n_img):
            for c in range(c_in):
                for oh in range(ho):
                    h0 = oh * stride
                    for ow in range(wo):
                        w0 = ow * stride
                        best = -INFINITY
                        best_i = -1
                        for ki in range(k):
                            for kj in range(k):
                                v = xp[n, c, h0 + ki, w0 + kj]
                                if v > best or best_i < 0:
                                    best = v
                                    best_i = (h0 + ki) * wp + (w0 + kj)
                        out[n, c, oh, ow] = best
                        arg[n, c, oh, ow] = best_i
    return out_arr, arg_arr


def maxpool_backward(const double[:, :, :, ::1] grad_out,
                     const long long[:, :, :, ::1] argmax,
                     Py_ssize_t hp, Py_ssize_t wp):
    cdef Py_ssize_t n_img = grad_out.shape[0], c_in = grad_out.shape[1]
    cdef Py_ssize_t ho = grad_out.shape[2], wo = grad_out.shape[3]
    out_arr = np.zeros((n_img, c_in, hp, wp), dtype=np.float64)
    cdef double[:, :, :, ::1] out = out_arr
    cdef Py_ssize_t n, c, oh, ow, idx
    with nogil:
        for n in range(n_img):
            for c in range(c_in):
                for oh in range(ho):
                    for ow in range(wo):
                        idx = argmax[n, c, oh, ow]
                        out[n, c, idx // wp, idx % wp] += grad_out[n, c, oh, ow]
    return out_arr
