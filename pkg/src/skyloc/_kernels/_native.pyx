# cython: boundscheck=False, wraparound=False, cdivision=True
"""Compiled per-pixel kernels: soft detection maps, hard detection rule,
and the pairwise squared-distance matrix.  Semantics mirror
``skyloc._kernels.numpy_impl`` exactly."""

import numpy as np

cimport numpy as cnp
from libc.math cimport exp, INFINITY

cnp.import_array()


def soft_detection_components(double[:, :, ::1] resp):
    cdef Py_ssize_t h = resp.shape[0]
    cdef Py_ssize_t w = resp.shape[1]
    cdef Py_ssize_t n = resp.shape[2]
    eta_arr = np.empty((h, w, n), dtype=np.float64)
    zeta_arr = np.empty((h, w, n), dtype=np.float64)
    phi_arr = np.empty((h, w), dtype=np.float64)
    cdef double[:, :, ::1] eta = eta_arr
    cdef double[:, :, ::1] zeta = zeta_arr
    cdef double[:, ::1] phi = phi_arr

    cdef Py_ssize_t i, j, k, ii, jj, i0, i1, j0, j1
    cdef double m, s, cmax, best, v
    for i in range(h):
        i0 = i - 1 if i > 0 else 0
        i1 = i + 1 if i + 1 < h else h - 1
        for j in range(w):
            j0 = j - 1 if j > 0 else 0
            j1 = j + 1 if j + 1 < w else w - 1
            cmax = resp[i, j, 0]
            for k in range(1, n):
                if resp[i, j, k] > cmax:
                    cmax = resp[i, j, k]
            best = -INFINITY
            for k in range(n):
                # per-neighborhood max subtraction keeps the exponentials bounded
                m = -INFINITY
                for ii in range(i0, i1 + 1):
                    for jj in range(j0, j1 + 1):
                        if resp[ii, jj, k] > m:
                            m = resp[ii, jj, k]
                s = 0.0
                for ii in range(i0, i1 + 1):
                    for jj in range(j0, j1 + 1):
                        s += exp(resp[ii, jj, k] - m)
                eta[i, j, k] = exp(resp[i, j, k] - m) / s
                zeta[i, j, k] = resp[i, j, k] / cmax
                v = eta[i, j, k] * zeta[i, j, k]
                if v > best:
                    best = v
            phi[i, j] = best
    return eta_arr, zeta_arr, phi_arr


def hard_detect_mask(double[:, :, ::1] resp):
    cdef Py_ssize_t h = resp.shape[0]
    cdef Py_ssize_t w = resp.shape[1]
    cdef Py_ssize_t n = resp.shape[2]
    mask_arr = np.zeros((h, w), dtype=np.bool_)
    cdef cnp.uint8_t[:, ::1] mask = mask_arr.view(np.uint8)

    cdef Py_ssize_t i, j, k, ks, ii, jj, i0, i1, j0, j1
    cdef double rk
    cdef bint ok
    for i in range(h):
        i0 = i - 1 if i > 0 else 0
        i1 = i + 1 if i + 1 < h else h - 1
        for j in range(w):
            j0 = j - 1 if j > 0 else 0
            j1 = j + 1 if j + 1 < w else w - 1
            ks = 0
            for k in range(1, n):
                if resp[i, j, k] > resp[i, j, ks]:
                    ks = k
            rk = resp[i, j, ks]
            ok = True
            for ii in range(i0, i1 + 1):
                for jj in range(j0, j1 + 1):
                    if ii == i and jj == j:
                        continue
                    if not rk > resp[ii, jj, ks]:
                        ok = False
                        break
                if not ok:
                    break
            if ok:
                mask[i, j] = 1
    return mask_arr


def pairwise_sqdist(double[:, ::1] a, double[:, ::1] b):
    cdef Py_ssize_t na = a.shape[0]
    cdef Py_ssize_t nb = b.shape[0]
    cdef Py_ssize_t d = a.shape[1]
    out_arr = np.empty((na, nb), dtype=np.float64)
    cdef double[:, ::1] out = out_arr

    cdef Py_ssize_t i, j, k
    cdef double s, diff
    for i in range(na):
        for j in range(nb):
            s = 0.0
            for k in range(d):
                diff = a[i, k] - b[j, k]
                s += diff * diff
            out[i, j] = s
    return out_arr
