# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True
"""Compiled hot loops: displaced-block statistics and random-threshold scans."""

import numpy as np

cimport numpy as cnp
from libc.math cimport erfc, log, log1p, sqrt, fabs

cnp.import_array()

cdef double LOG2PI = 1.8378770664093453


def block_stats(double[::1] y, double[::1] s2, cnp.intp_t[::1] tgt,
                double[::1] eta_vox, double[::1] sig2_vox, Py_ssize_t d):
    """Per-voxel block statistics; see kernels_py.block_stats."""
    cdef Py_ssize_t n = y.shape[0], i
    cdef cnp.intp_t t
    cdef double A, r, inv
    cnt_a = np.zeros(d); s_inv_a = np.zeros(d); s_log_a = np.zeros(d)
    s_r_a = np.zeros(d); s_r2_a = np.zeros(d)
    cdef double[::1] cnt = cnt_a, s_inv = s_inv_a, s_log = s_log_a
    cdef double[::1] s_r = s_r_a, s_r2 = s_r2_a
    for i in range(n):
        t = tgt[i]
        A = sig2_vox[t] + s2[i]
        r = y[i] - eta_vox[t]
        inv = 1.0 / A
        cnt[t] += 1.0
        s_inv[t] += inv
        s_log[t] += log(A)
        s_r[t] += r * inv
        s_r2[t] += r * r * inv
    return cnt_a, s_inv_a, s_log_a, s_r_a, s_r2_a


def block_loglik_values(double[::1] cnt, double[::1] s_inv, double[::1] s_log,
                        double[::1] s_r, double[::1] s_r2, nu2_vox):
    """Per-voxel block log-likelihoods; see kernels_py.block_loglik_values."""
    cdef Py_ssize_t d = cnt.shape[0], k
    nu2_a = np.broadcast_to(np.asarray(nu2_vox, dtype=np.float64), (d,)).astype(np.float64)
    out_a = np.zeros(d)
    cdef double[::1] nu2 = nu2_a, out = out_a
    cdef double quad
    for k in range(d):
        if cnt[k] == 0.0:
            continue
        quad = s_r2[k]
        if nu2[k] > 0.0:
            quad -= s_r[k] * s_r[k] / (1.0 / nu2[k] + s_inv[k])
        out[k] = -0.5 * (cnt[k] * LOG2PI + s_log[k] + log1p(nu2[k] * s_inv[k]) + quad)
    return out_a


cdef double _eta_one(double[::1] X, Py_ssize_t k, Py_ssize_t n, double[::1] H,
                     double sigma) nogil:
    """eta for the suffix X[k:] (varying window, l-inf norm).

    When sigma > 0, X holds sorted |y| and the exponential transform is
    applied on the fly at that sigma; otherwise X is already transformed.
    """
    cdef Py_ssize_t m = n - k, j
    cdef double T = 0.0, Tm = 0.0, x, best = 0.0, Q, dev
    cdef double inv_sqrt2sig = 0.0
    if sigma > 0.0:
        inv_sqrt2sig = 1.0 / (sigma * sqrt(2.0))
        for j in range(k, n):
            Tm += -log(erfc(X[j] * inv_sqrt2sig))
    else:
        for j in range(k, n):
            Tm += X[j]
    for j in range(1, m + 1):
        if sigma > 0.0:
            x = -log(erfc(X[k + j - 1] * inv_sqrt2sig))
        else:
            x = X[k + j - 1]
        T += x
        Q = j * (1.0 + H[m] - H[j]) / m * Tm
        dev = fabs(T - Q)
        if dev > best:
            best = dev
    return best / sqrt(<double> m)


def eta_varying(double[::1] X, ks, double[::1] H):
    """Varying-window eta profile, known variance; see kernels_py.eta_varying."""
    cdef cnp.intp_t[::1] kk = np.ascontiguousarray(ks, dtype=np.intp)
    cdef Py_ssize_t n = X.shape[0], nk = kk.shape[0], i
    out_a = np.empty(nk)
    cdef double[::1] out = out_a
    with nogil:
        for i in range(nk):
            out[i] = _eta_one(X, kk[i], n, H, 0.0)
    return out_a


def eta_varying_unknown(double[::1] absy, double[::1] sigmas, ks, double[::1] H):
    """Varying-window eta profile with per-k plug-in variance."""
    cdef cnp.intp_t[::1] kk = np.ascontiguousarray(ks, dtype=np.intp)
    cdef Py_ssize_t n = absy.shape[0], nk = kk.shape[0], i
    out_a = np.empty(nk)
    cdef double[::1] out = out_a
    with nogil:
        for i in range(nk):
            out[i] = _eta_one(absy, kk[i], n, H, sigmas[i])
    return out_a
