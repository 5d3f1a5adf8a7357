# cython: boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled LSTM sequence kernels. See scevae._kernels for the contract."""

import numpy as np

cimport numpy as cnp
from libc.math cimport tanh

cnp.import_array()


cdef inline double _sigmoid(double x) nogil:
    return 0.5 * (tanh(0.5 * x) + 1.0)


def lstm_seq_forward(double[:, ::1] xp, double[:, ::1] U,
                     double[::1] h0, double[::1] c0):
    cdef Py_ssize_t T = xp.shape[0]
    cdef Py_ssize_t H4 = xp.shape[1]
    cdef Py_ssize_t H = H4 // 4
    h_arr = np.empty((T, H))
    c_arr = np.empty((T, H))
    g_arr = np.empty((T, H4))
    tc_arr = np.empty((T, H))
    cdef double[:, ::1] h = h_arr
    cdef double[:, ::1] c = c_arr
    cdef double[:, ::1] gates = g_arr
    cdef double[:, ::1] tanhc = tc_arr
    a_buf = np.empty(H4)
    cdef double[::1] a = a_buf
    cdef Py_ssize_t t, m, j
    cdef double acc, gi, gf, gg, go, ct, tc, cprev, hprev_j

    with nogil:
        for t in range(T):
            for m in range(H4):
                acc = xp[t, m]
                if t == 0:
                    for j in range(H):
                        acc += U[m, j] * h0[j]
                else:
                    for j in range(H):
                        acc += U[m, j] * h[t - 1, j]
                a[m] = acc
            for j in range(H):
                gi = _sigmoid(a[j])
                gf = _sigmoid(a[H + j])
                gg = tanh(a[2 * H + j])
                go = _sigmoid(a[3 * H + j])
                cprev = c0[j] if t == 0 else c[t - 1, j]
                ct = gf * cprev + gi * gg
                tc = tanh(ct)
                gates[t, j] = gi
                gates[t, H + j] = gf
                gates[t, 2 * H + j] = gg
                gates[t, 3 * H + j] = go
                c[t, j] = ct
                tanhc[t, j] = tc
                h[t, j] = go * tc
    return h_arr, c_arr, g_arr, tc_arr


def lstm_seq_backward(double[:, ::1] dh_out, double[:, ::1] U,
                      double[:, ::1] gates, double[:, ::1] c,
                      double[:, ::1] tanhc, double[::1] c0):
    cdef Py_ssize_t T = dh_out.shape[0]
    cdef Py_ssize_t H = dh_out.shape[1]
    cdef Py_ssize_t H4 = 4 * H
    da_arr = np.empty((T, H4))
    dh0_arr = np.zeros(H)
    dc0_arr = np.zeros(H)
    cdef double[:, ::1] da = da_arr
    cdef double[::1] dh = dh0_arr
    cdef double[::1] dc = dc0_arr
    cdef Py_ssize_t t, m, j
    cdef double dht, dct, gi, gf, gg, go, tc, cprev, acc

    with nogil:
        for t in range(T - 1, -1, -1):
            for j in range(H):
                dht = dh_out[t, j] + dh[j]
                gi = gates[t, j]
                gf = gates[t, H + j]
                gg = gates[t, 2 * H + j]
                go = gates[t, 3 * H + j]
                tc = tanhc[t, j]
                cprev = c0[j] if t == 0 else c[t - 1, j]
                dct = dc[j] + dht * go * (1.0 - tc * tc)
                da[t, j] = dct * gg * gi * (1.0 - gi)
                da[t, H + j] = dct * cprev * gf * (1.0 - gf)
                da[t, 2 * H + j] = dct * gi * (1.0 - gg * gg)
                da[t, 3 * H + j] = dht * tc * go * (1.0 - go)
                dc[j] = dct * gf
            for j in range(H):
                acc = 0.0
                for m in range(H4):
                    acc += da[t, m] * U[m, j]
                dh[j] = acc
    return da_arr, dh0_arr, dc0_arr
