# cython: boundscheck=False, wraparound=False, cdivision=True
"""Compiled direct-loop conv kernels. Same contracts as numpy_backend."""

import numpy as np

cimport numpy as cnp

cnp.import_array()

BACKEND = "cython"


def conv2d_forward(cnp.ndarray[cnp.float32_t, ndim=3] x,
                   cnp.ndarray[cnp.float32_t, ndim=4] w,
                   int stride, int pad):
    cdef int cin = x.shape[0], h = x.shape[1], wid = x.shape[2]
    cdef int cout = w.shape[0], cing = w.shape[1], kh = w.shape[2], kw = w.shape[3]
    cdef int groups = cin // cing
    cdef int og = cout // groups
    cdef int ho = (h + 2 * pad - kh) // stride + 1
    cdef int wo = (wid + 2 * pad - kw) // stride + 1
    cdef cnp.ndarray[cnp.float32_t, ndim=3] y = np.zeros((cout, ho, wo), dtype=np.float32)
    cdef float[:, :, :] xv = x
    cdef float[:, :, :, :] wv = w
    cdef float[:, :, :] yv = y
    cdef int oc, g, c, ci, i, j, ki, kj, ii, jj
    cdef float acc
    with nogil:
        for oc in range(cout):
            g = oc // og
            for i in range(ho):
                for j in range(wo):
                    acc = 0.0
                    for c in range(cing):
                        ci = g * cing + c
                        for ki in range(kh):
                            ii = i * stride + ki - pad
                            if ii < 0 or ii >= h:
                                continue
                            for kj in range(kw):
                                jj = j * stride + kj - pad
                                if jj < 0 or jj >= wid:
                                    continue
                                acc += xv[ci, ii, jj] * wv[oc, c, ki, kj]
                    yv[oc, i, j] = acc
    return y


def conv2d_backward(cnp.ndarray[cnp.float32_t, ndim=3] x,
                    cnp.ndarray[cnp.float32_t, ndim=4] w,
                    cnp.ndarray[cnp.float32_t, ndim=3] dy,
                    int stride, int pad):
    cdef int cin = x.shape[0], h = x.shape[1], wid = x.shape[2]
    cdef int cout = w.shape[0], cing = w.shape[1], kh = w.shape[2], kw = w.shape[3]
    cdef int groups = cin // cing
    cdef int og = cout // groups
    cdef int ho = dy.shape[1], wo = dy.shape[2]
    cdef cnp.ndarray[cnp.float32_t, ndim=3] dx = np.zeros((cin, h, wid), dtype=np.float32)
    cdef cnp.ndarray[cnp.float32_t, ndim=4] dw = np.zeros((cout, cing, kh, kw), dtype=np.float32)
    cdef float[:, :, :] xv = x, dyv = dy, dxv = dx
    cdef float[:, :, :, :] wv = w, dwv = dw
    cdef int oc, g, c, ci, i, j, ki, kj, ii, jj
    cdef float gval
    with nogil:
        for oc in range(cout):
            g = oc // og
            for i in range(ho):
                for j in range(wo):
                    gval = dyv[oc, i, j]
                    if gval == 0.0:
                        continue
                    for c in range(cing):
                        ci = g * cing + c
                        for ki in range(kh):
                            ii = i * stride + ki - pad
                            if ii < 0 or ii >= h:
                                continue
                            for kj in range(kw):
                                jj = j * stride + kj - pad
                                if jj < 0 or jj >= wid:
                                    continue
                                dwv[oc, c, ki, kj] += xv[ci, ii, jj] * gval
                                dxv[ci, ii, jj] += wv[oc, c, ki, kj] * gval
    return dx, dw
