# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True
"""Compiled raster kernels. Must agree bit-for-bit with ``_kernels_py``."""

import numpy as np
cimport numpy as cnp

cnp.import_array()

ctypedef cnp.int64_t i64


def rasterize_min(const i64[::1] cols, const i64[::1] rows, const double[::1] depth,
                  Py_ssize_t height, Py_ssize_t width):
    cdef Py_ssize_t n = depth.shape[0]
    cdef Py_ssize_t i, r, c
    out_np = np.zeros((height, width), dtype=np.float64)
    win_np = np.full((height, width), -1, dtype=np.int64)
    cdef double[:, ::1] out = out_np
    cdef i64[:, ::1] win = win_np
    for i in range(n):
        r = rows[i]
        c = cols[i]
        if r < 0 or r >= height or c < 0 or c >= width:
            continue
        if win[r, c] < 0 or depth[i] < out[r, c]:
            out[r, c] = depth[i]
            win[r, c] = i
    return out_np, win_np


def fill_columns(const i64[::1] cols, const i64[::1] row_lo, const i64[::1] row_hi,
                 const double[::1] depth, Py_ssize_t height, Py_ssize_t width):
    cdef Py_ssize_t n = depth.shape[0]
    cdef Py_ssize_t i, r, c, r0, r1
    cdef double d
    out_np = np.zeros((height, width), dtype=np.float64)
    cdef double[:, ::1] out = out_np
    for i in range(n):
        c = cols[i]
        if c < 0 or c >= width:
            continue
        r0 = row_lo[i]
        r1 = row_hi[i]
        if r0 < 0:
            r0 = 0
        if r1 > height - 1:
            r1 = height - 1
        d = depth[i]
        for r in range(r0, r1 + 1):
            if out[r, c] == 0.0 or d < out[r, c]:
                out[r, c] = d
    return out_np


def splat_mer(const i64[::1] cols, const i64[::1] rows, const double[::1] depth,
              Py_ssize_t height, Py_ssize_t width, double inv_su2, double inv_sv2,
              const double[::1] qmax, Py_ssize_t rad_u, Py_ssize_t rad_v):
    cdef Py_ssize_t n = depth.shape[0]
    cdef Py_ssize_t nch = qmax.shape[0]
    cdef Py_ssize_t i, j, r, c, r0, c0
    cdef double d, q, du, dv
    out_np = np.zeros((nch, height, width), dtype=np.float64)
    cdef double[:, :, ::1] out = out_np
    for i in range(n):
        r0 = rows[i]
        c0 = cols[i]
        d = depth[i]
        for r in range(r0 - rad_v, r0 + rad_v + 1):
            if r < 0 or r >= height:
                continue
            dv = <double>(r - r0)
            for c in range(c0 - rad_u, c0 + rad_u + 1):
                if c < 0 or c >= width:
                    continue
                du = <double>(c - c0)
                q = du * du * inv_su2 + dv * dv * inv_sv2
                for j in range(nch):
                    if q <= qmax[j]:
                        if out[j, r, c] == 0.0 or d < out[j, r, c]:
                            out[j, r, c] = d
    return out_np
