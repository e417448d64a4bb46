# cython: boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Direct-loop grouped, strided 1D cross-correlation on float64 buffers.

All inputs are C-contiguous and already zero-padded along time. Shapes:
x (B, C_in, Lp), w (C_out, C_in // groups, K), grad_out (B, C_out, L_out).
Loop order keeps the innermost loop on contiguous time so it vectorizes.
"""
import numpy as np


def conv1d_forward(const double[:, :, ::1] x, const double[:, :, ::1] w,
                   Py_ssize_t stride, Py_ssize_t groups):
    cdef Py_ssize_t B = x.shape[0], Lp = x.shape[2]
    cdef Py_ssize_t C_out = w.shape[0], cig = w.shape[1], K = w.shape[2]
    cdef Py_ssize_t cog = C_out // groups
    cdef Py_ssize_t L_out = (Lp - K) // stride + 1
    out = np.zeros((B, C_out, L_out), dtype=np.float64)
    cdef double[:, :, ::1] o = out
    cdef Py_ssize_t b, oc, i, ic, k, t
    cdef double wv
    cdef const double* xr
    cdef double* orow
    with nogil:
        for b in range(B):
            for oc in range(C_out):
                orow = &o[b, oc, 0]
                for i in range(cig):
                    ic = (oc // cog) * cig + i
                    for k in range(K):
                        wv = w[oc, i, k]
                        xr = &x[b, ic, k]
                        if stride == 1:
                            for t in range(L_out):
                                orow[t] += wv * xr[t]
                        else:
                            for t in range(L_out):
                                orow[t] += wv * xr[t * stride]
    return out


def conv1d_backward_input(const double[:, :, ::1] grad_out, const double[:, :, ::1] w,
                          Py_ssize_t Lp, Py_ssize_t stride, Py_ssize_t groups):
    cdef Py_ssize_t B = grad_out.shape[0], L_out = grad_out.shape[2]
    cdef Py_ssize_t C_out = w.shape[0], cig = w.shape[1], K = w.shape[2]
    cdef Py_ssize_t cog = C_out // groups
    cdef Py_ssize_t C_in = cig * groups
    gx = np.zeros((B, C_in, Lp), dtype=np.float64)
    cdef double[:, :, ::1] gxv = gx
    cdef Py_ssize_t b, oc, i, ic, k, t
    cdef double wv
    cdef const double* gr
    cdef double* xr
    with nogil:
        for b in range(B):
            for oc in range(C_out):
                gr = &grad_out[b, oc, 0]
                for i in range(cig):
                    ic = (oc // cog) * cig + i
                    for k in range(K):
                        wv = w[oc, i, k]
                        xr = &gxv[b, ic, k]
                        if stride == 1:
                            for t in range(L_out):
                                xr[t] += wv * gr[t]
                        else:
                            for t in range(L_out):
                                xr[t * stride] += wv * gr[t]
    return gx


def conv1d_backward_weight(const double[:, :, ::1] grad_out, const double[:, :, ::1] x,
                           Py_ssize_t K, Py_ssize_t stride, Py_ssize_t groups):
    cdef Py_ssize_t B = grad_out.shape[0], C_out = grad_out.shape[1], L_out = grad_out.shape[2]
    cdef Py_ssize_t C_in = x.shape[1]
    cdef Py_ssize_t cig = C_in // groups, cog = C_out // groups
    gw = np.zeros((C_out, cig, K), dtype=np.float64)
    cdef double[:, :, ::1] gwv = gw
    cdef Py_ssize_t b, oc, i, ic, k, t
    cdef double gt
    cdef const double* xr
    cdef double* wr
    # axpy over taps: gw[oc, i, :] += g[b, oc, t] * x[b, ic, t*stride : t*stride + K]
    with nogil:
        for oc in range(C_out):
            for i in range(cig):
                ic = (oc // cog) * cig + i
                wr = &gwv[oc, i, 0]
                for b in range(B):
                    for t in range(L_out):
                        gt = grad_out[b, oc, t]
                        xr = &x[b, ic, t * stride]
                        for k in range(K):
                            wr[k] += gt * xr[k]
    return gw
