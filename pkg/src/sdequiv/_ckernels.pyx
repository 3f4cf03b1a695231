# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True
"""Compiled versions of the inner loops in :mod:`sdequiv._pykernels`.

Every routine here must reproduce its NumPy twin bit for bit; the test
suite compares the two backends with ``array_equal``.
"""

import numpy as np

cimport numpy as cnp
from libc.math cimport floor

cnp.import_array()


def return_to_go(const double[:, ::1] costs, double gamma):
    cdef Py_ssize_t n = costs.shape[0]
    cdef Py_ssize_t T = costs.shape[1]
    cdef Py_ssize_t i, t
    cdef double acc
    out_arr = np.empty((n, T), dtype=np.float64)
    cdef double[:, ::1] out = out_arr
    for i in range(n):
        acc = 0.0
        for t in range(T - 1, -1, -1):
            acc = costs[i, t] + gamma * acc
            out[i, t] = acc
    return out_arr


def interp_weights(const double[:, ::1] points, const double[::1] lo,
                   const double[::1] step, const cnp.int64_t[::1] n):
    cdef Py_ssize_t m = points.shape[0]
    cdef Py_ssize_t d = points.shape[1]
    cdef Py_ssize_t ncorner = 1 << d
    cdef Py_ssize_t j, a, b, c, bit
    cdef double p, t, w, dw
    cdef cnp.int64_t i, flat, stride
    cdef bint clamp
    idx_arr = np.empty((m, ncorner), dtype=np.int64)
    w_arr = np.empty((m, ncorner), dtype=np.float64)
    dw_arr = np.empty((m, ncorner, d), dtype=np.float64)
    clamped_arr = np.zeros(m, dtype=np.bool_)
    cdef cnp.int64_t[:, ::1] idx = idx_arr
    cdef double[:, ::1] wv = w_arr
    cdef double[:, :, ::1] dwv = dw_arr
    cdef cnp.npy_bool[::1] clamped = clamped_arr
    # per-axis lower index, fraction, slope factor (0 when clamped)
    cell_arr = np.empty(d, dtype=np.int64)
    frac_arr = np.empty(d, dtype=np.float64)
    slope_arr = np.empty(d, dtype=np.float64)
    cdef cnp.int64_t[::1] cell = cell_arr
    cdef double[::1] frac = frac_arr
    cdef double[::1] slope = slope_arr
    for j in range(m):
        for a in range(d):
            p = (points[j, a] - lo[a]) / step[a]
            clamp = False
            if p < 0.0:
                p = 0.0
                clamp = True
            elif p > n[a] - 1:
                p = <double>(n[a] - 1)
                clamp = True
            i = <cnp.int64_t>floor(p)
            if i > n[a] - 2:
                i = n[a] - 2
            cell[a] = i
            frac[a] = p - i
            if clamp:
                slope[a] = 0.0
                clamped[j] = True
            else:
                slope[a] = 1.0 / step[a]
        for c in range(ncorner):
            flat = 0
            stride = 1
            for a in range(d - 1, -1, -1):
                bit = (c >> (d - 1 - a)) & 1
                flat += (cell[a] + bit) * stride
                stride *= n[a]
            idx[j, c] = flat
            w = 1.0
            for a in range(d):
                bit = (c >> (d - 1 - a)) & 1
                if bit:
                    w = w * frac[a]
                else:
                    w = w * (1.0 - frac[a])
            wv[j, c] = w
            for a in range(d):
                dw = 1.0
                for b in range(d):
                    if b == a:
                        if (c >> (d - 1 - a)) & 1:
                            dw = dw * slope[a]
                        else:
                            dw = dw * (-slope[a])
                    elif (c >> (d - 1 - b)) & 1:
                        dw = dw * frac[b]
                    else:
                        dw = dw * (1.0 - frac[b])
                dwv[j, c, a] = dw
    return idx_arr, w_arr, dw_arr, clamped_arr
