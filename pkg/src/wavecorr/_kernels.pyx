# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True
"""Compiled convolution kernels. Same contract as ``_kernels_py``."""
import numpy as np
cimport numpy as cnp

cnp.import_array()


def conv_forward(double[:, :, ::1] x, double[:, :, ::1] W, double[::1] b,
                 Py_ssize_t dilation, Py_ssize_t start):
    cdef Py_ssize_t m = x.shape[0], L = x.shape[1], c_in = x.shape[2]
    cdef Py_ssize_t c_out = W.shape[0], k = W.shape[2]
    cdef Py_ssize_t n_out = L - start
    cdef Py_ssize_t i, j, o, c, tap, src
    cdef double acc
    cdef double[:, :, ::1] Wt = np.ascontiguousarray(np.transpose(W, (2, 0, 1)))
    out = np.empty((m, n_out, c_out))
    cdef double[:, :, ::1] ov = out
    for i in range(m):
        for j in range(n_out):
            for o in range(c_out):
                acc = b[o]
                for tap in range(k):
                    src = start + j - (k - 1 - tap) * dilation
                    if src < 0:
                        continue
                    for c in range(c_in):
                        acc += x[i, src, c] * Wt[tap, o, c]
                ov[i, j, o] = acc
    return out


def conv_backward(double[:, :, ::1] gout, double[:, :, ::1] x,
                  double[:, :, ::1] W, Py_ssize_t dilation, Py_ssize_t start):
    cdef Py_ssize_t m = x.shape[0], L = x.shape[1], c_in = x.shape[2]
    cdef Py_ssize_t c_out = W.shape[0], k = W.shape[2]
    cdef Py_ssize_t n_out = L - start
    cdef Py_ssize_t i, j, o, c, tap, src
    cdef double g
    cdef double[:, :, ::1] Wt = np.ascontiguousarray(np.transpose(W, (2, 0, 1)))
    gx = np.zeros((m, L, c_in))
    gWt = np.zeros((k, c_out, c_in))
    gb = np.zeros(c_out)
    cdef double[:, :, ::1] gxv = gx
    cdef double[:, :, ::1] gWv = gWt
    cdef double[::1] gbv = gb
    for i in range(m):
        for j in range(n_out):
            for o in range(c_out):
                g = gout[i, j, o]
                if g == 0.0:
                    continue
                gbv[o] += g
                for tap in range(k):
                    src = start + j - (k - 1 - tap) * dilation
                    if src < 0:
                        continue
                    for c in range(c_in):
                        gxv[i, src, c] += g * Wt[tap, o, c]
                        gWv[tap, o, c] += g * x[i, src, c]
    return gx, np.ascontiguousarray(np.transpose(gWt, (1, 2, 0))), gb


def corr_forward(double[:, :, ::1] x, double[:, ::1] w, double b):
    cdef Py_ssize_t m = x.shape[0], L = x.shape[1], d = x.shape[2]
    cdef Py_ssize_t i, j, k, c
    cdef double acc
    cross = np.zeros(L)
    out = np.empty((m, L))
    cdef double[::1] cv = cross
    cdef double[:, ::1] ov = out
    for k in range(m):
        for j in range(L):
            acc = 0.0
            for c in range(d):
                acc += x[k, j, c] * w[k + 1, c]
            cv[j] += acc
    for i in range(m):
        for j in range(L):
            acc = 0.0
            for c in range(d):
                acc += x[i, j, c] * w[0, c]
            ov[i, j] = acc + cv[j] + b
    return out


def corr_backward(double[:, ::1] gout, double[:, :, ::1] x, double[:, ::1] w):
    cdef Py_ssize_t m = x.shape[0], L = x.shape[1], d = x.shape[2]
    cdef Py_ssize_t i, j, c
    cdef double g, gb = 0.0
    gsum = np.zeros(L)
    gx = np.empty((m, L, d))
    gw = np.zeros((m + 1, d))
    cdef double[::1] gs = gsum
    cdef double[:, :, ::1] gxv = gx
    cdef double[:, ::1] gwv = gw
    for i in range(m):
        for j in range(L):
            gs[j] += gout[i, j]
            gb += gout[i, j]
    for i in range(m):
        for j in range(L):
            g = gout[i, j]
            for c in range(d):
                gxv[i, j, c] = g * w[0, c] + gs[j] * w[i + 1, c]
                gwv[0, c] += g * x[i, j, c]
                gwv[i + 1, c] += gs[j] * x[i, j, c]
    return gx, gw, gb
