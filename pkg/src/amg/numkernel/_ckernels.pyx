# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True
"""Compiled versions of the kernels in ``_kernels_py``."""
import numpy as np
cimport numpy as cnp
from cython cimport floating
from libc.math cimport exp, expf, sqrt

cnp.import_array()


def softmax_masked_fwd(floating[:, :, ::1] x, floating[:, ::1] mask):
    cdef Py_ssize_t B = x.shape[0], n = x.shape[1], k = x.shape[2]
    cdef Py_ssize_t b, i, j
    cdef floating m, v
    cdef double s
    dtype = np.float32 if floating is float else np.float64
    out = np.empty((B, n, k), dtype=dtype)
    cdef floating[:, :, ::1] y = out
    cdef floating* row
    with nogil:
        for b in range(B):
            for i in range(n):
                row = &y[b, i, 0]
                for j in range(k):
                    row[j] = x[b, i, j] + mask[i, j]
                m = row[0]
                for j in range(1, k):
                    if row[j] > m:
                        m = row[j]
                # masked lanes sit ~1e9 below the max and underflow to exactly 0
                for j in range(k):
                    v = row[j] - m
                    if floating is float:
                        row[j] = expf(v) if v > -104.0 else 0.0
                    else:
                        row[j] = exp(v) if v > -745.0 else 0.0
                s = 0.0
                for j in range(k):
                    s += row[j]
                for j in range(k):
                    row[j] = <floating>(row[j] / s)
    return out


def softmax_masked_bwd(floating[:, :, ::1] y, floating[:, :, ::1] gy):
    cdef Py_ssize_t B = y.shape[0], n = y.shape[1], k = y.shape[2]
    cdef Py_ssize_t b, i, j
    cdef double dot
    dtype = np.float32 if floating is float else np.float64
    out = np.empty((B, n, k), dtype=dtype)
    cdef floating[:, :, ::1] gx = out
    with nogil:
        for b in range(B):
            for i in range(n):
                dot = 0.0
                for j in range(k):
                    dot += gy[b, i, j] * y[b, i, j]
                for j in range(k):
                    gx[b, i, j] = <floating>(y[b, i, j] * (gy[b, i, j] - dot))
    return out


def layer_norm_fwd(floating[:, ::1] x, floating[::1] gain, floating[::1] bias, double eps):
    cdef Py_ssize_t R = x.shape[0], D = x.shape[1]
    cdef Py_ssize_t r, j
    cdef double mu, var, rs, c
    dtype = np.float32 if floating is float else np.float64
    y_arr = np.empty((R, D), dtype=dtype)
    xh_arr = np.empty((R, D), dtype=dtype)
    rs_arr = np.empty(R, dtype=dtype)
    cdef floating[:, ::1] y = y_arr
    cdef floating[:, ::1] xh = xh_arr
    cdef floating[::1] rstd = rs_arr
    with nogil:
        for r in range(R):
            mu = 0.0
            for j in range(D):
                mu += x[r, j]
            mu /= D
            var = 0.0
            for j in range(D):
                c = x[r, j] - mu
                var += c * c
            var /= D
            rs = 1.0 / sqrt(var + eps)
            rstd[r] = <floating>rs
            for j in range(D):
                c = (x[r, j] - mu) * rs
                xh[r, j] = <floating>c
                y[r, j] = <floating>(c * gain[j] + bias[j])
    return y_arr, xh_arr, rs_arr


def layer_norm_bwd(floating[:, ::1] gy, floating[:, ::1] xh, floating[::1] rstd,
                   floating[::1] gain):
    cdef Py_ssize_t R = gy.shape[0], D = gy.shape[1]
    cdef Py_ssize_t r, j
    cdef double a, b, g
    dtype = np.float32 if floating is float else np.float64
    gx_arr = np.empty((R, D), dtype=dtype)
    gg_arr = np.zeros(D, dtype=np.float64)
    gb_arr = np.zeros(D, dtype=np.float64)
    cdef floating[:, ::1] gx = gx_arr
    cdef double[::1] gg = gg_arr
    cdef double[::1] gb = gb_arr
    with nogil:
        for r in range(R):
            a = 0.0
            b = 0.0
            for j in range(D):
                g = gy[r, j] * gain[j]
                a += g
                b += g * xh[r, j]
                gg[j] += gy[r, j] * xh[r, j]
                gb[j] += gy[r, j]
            a /= D
            b /= D
            for j in range(D):
                g = gy[r, j] * gain[j]
                gx[r, j] = <floating>((g - a - xh[r, j] * b) * rstd[r])
    return gx_arr, gg_arr.astype(dtype), gb_arr.astype(dtype)


def lcs_length(a, b):
    cdef long[::1] x = np.ascontiguousarray(a, dtype=np.int64) if len(a) else np.zeros(0, dtype=np.int64)
    cdef long[::1] y = np.ascontiguousarray(b, dtype=np.int64) if len(b) else np.zeros(0, dtype=np.int64)
    cdef Py_ssize_t n = x.shape[0], m = y.shape[0], i, j
    if n == 0 or m == 0:
        return 0
    prev_arr = np.zeros(m + 1, dtype=np.int64)
    cur_arr = np.zeros(m + 1, dtype=np.int64)
    cdef long[::1] prev = prev_arr
    cdef long[::1] cur = cur_arr
    cdef long[::1] tmp
    with nogil:
        for i in range(n):
            cur[0] = 0
            for j in range(1, m + 1):
                if x[i] == y[j - 1]:
                    cur[j] = prev[j - 1] + 1
                elif cur[j - 1] > prev[j]:
                    cur[j] = cur[j - 1]
                else:
                    cur[j] = prev[j]
            tmp = prev
            prev = cur
            cur = tmp
    return int(prev[m])
