# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled versions of the kernels in ``_kernels_py``; same signatures and results."""
import numpy as np
cimport numpy as cnp
from libc.math cimport exp, sqrt

cnp.import_array()


def softmax_rows(double[:, ::1] z):
    cdef Py_ssize_t B = z.shape[0], K = z.shape[1], i, k
    out = np.empty((B, K))
    cdef double[:, ::1] o = out
    cdef double mx, s
    for i in range(B):
        mx = z[i, 0]
        for k in range(1, K):
            if z[i, k] > mx:
                mx = z[i, k]
        s = 0.0
        for k in range(K):
            o[i, k] = exp(z[i, k] - mx)
            s += o[i, k]
        for k in range(K):
            o[i, k] /= s
    return out


def bn_forward(double[:, ::1] x, double eps):
    cdef Py_ssize_t B = x.shape[0], C = x.shape[1], i, j
    mu_a = np.zeros(C)
    var_a = np.zeros(C)
    inv_a = np.empty(C)
    xhat_a = np.empty((B, C))
    cdef double[::1] mu = mu_a, var = var_a, inv = inv_a
    cdef double[:, ::1] xh = xhat_a
    cdef double t
    for i in range(B):
        for j in range(C):
            mu[j] += x[i, j]
    for j in range(C):
        mu[j] /= B
    for i in range(B):
        for j in range(C):
            t = x[i, j] - mu[j]
            xh[i, j] = t
            var[j] += t * t
    for j in range(C):
        var[j] /= B
        inv[j] = 1.0 / sqrt(var[j] + eps)
    for i in range(B):
        for j in range(C):
            xh[i, j] *= inv[j]
    return xhat_a, mu_a, var_a, inv_a


def bn_backward(g_in, double[:, ::1] xhat, double[::1] inv_std):
    cdef double[:, ::1] g = np.ascontiguousarray(g_in, dtype=np.float64)
    cdef Py_ssize_t B = g.shape[0], C = g.shape[1], i, j
    gsum_a = np.zeros(C)
    gx_a = np.zeros(C)
    out_a = np.empty((B, C))
    cdef double[::1] gsum = gsum_a, gx = gx_a
    cdef double[:, ::1] o = out_a
    for i in range(B):
        for j in range(C):
            gsum[j] += g[i, j]
            gx[j] += g[i, j] * xhat[i, j]
    for i in range(B):
        for j in range(C):
            o[i, j] = (inv_std[j] / B) * (B * g[i, j] - gsum[j] - xhat[i, j] * gx[j])
    return out_a


def sq_dists(a_in, b_in):
    cdef double[:, ::1] a = np.ascontiguousarray(a_in, dtype=np.float64)
    cdef double[:, ::1] b = np.ascontiguousarray(b_in, dtype=np.float64)
    cross = np.asarray(a) @ np.asarray(b).T
    cdef double[:, ::1] d = cross
    cdef Py_ssize_t n = a.shape[0], m = b.shape[0], D = a.shape[1], i, j, k
    aa_a = np.zeros(n)
    bb_a = np.zeros(m)
    cdef double[::1] aa = aa_a, bb = bb_a
    cdef double t
    for i in range(n):
        for k in range(D):
            aa[i] += a[i, k] * a[i, k]
    for j in range(m):
        for k in range(D):
            bb[j] += b[j, k] * b[j, k]
    for i in range(n):
        for j in range(m):
            t = aa[i] + bb[j] - 2.0 * d[i, j]
            d[i, j] = t if t > 0.0 else 0.0
    return cross


def rbf_mixture(double[:, ::1] d, bandwidths):
    cdef double[::1] bw = np.ascontiguousarray(bandwidths, dtype=np.float64)
    cdef Py_ssize_t n = d.shape[0], m = d.shape[1], nb = bw.shape[0], i, j, k
    out_a = np.empty((n, m))
    cdef double[:, ::1] o = out_a
    cdef double s
    for i in range(n):
        for j in range(m):
            s = 0.0
            for k in range(nb):
                s += exp(-d[i, j] / bw[k])
            o[i, j] = s / nb
    return out_a


def gather_windows(double[:, :, ::1] seqs, seg_idx, starts, Py_ssize_t window_len):
    cdef cnp.int64_t[::1] si = np.ascontiguousarray(seg_idx, dtype=np.int64)
    cdef cnp.int64_t[::1] st = np.ascontiguousarray(starts, dtype=np.int64)
    cdef Py_ssize_t n = si.shape[0], D = seqs.shape[2], r, t, k, s, t0
    out_a = np.empty((n, window_len * D))
    cdef double[:, ::1] o = out_a
    for r in range(n):
        s = si[r]
        t0 = st[r]
        for t in range(window_len):
            for k in range(D):
                o[r, t * D + k] = seqs[s, t0 + t, k]
    return out_a


def relu_forward(double[:, ::1] x):
    cdef Py_ssize_t n = x.shape[0], m = x.shape[1], i, j
    out_a = np.empty((n, m))
    cdef double[:, ::1] o = out_a
    for i in range(n):
        for j in range(m):
            o[i, j] = x[i, j] if x[i, j] > 0.0 else 0.0
    return out_a


def relu_backward(g_in, double[:, ::1] out):
    cdef double[:, ::1] g = np.ascontiguousarray(g_in, dtype=np.float64)
    cdef Py_ssize_t n = g.shape[0], m = g.shape[1], i, j
    res_a = np.empty((n, m))
    cdef double[:, ::1] r = res_a
    for i in range(n):
        for j in range(m):
            r[i, j] = g[i, j] if out[i, j] > 0.0 else 0.0
    return res_a


def adam_update(p_arr, g_arr, m_arr, v_arr, double lr, double beta1, double beta2,
                double c1, double c2, double eps, double weight_decay):
    cdef double[::1] p = p_arr.reshape(-1)
    cdef double[::1] g = np.ascontiguousarray(g_arr, dtype=np.float64).reshape(-1)
    cdef double[::1] m = m_arr.reshape(-1)
    cdef double[::1] v = v_arr.reshape(-1)
    cdef Py_ssize_t n = p.shape[0], i
    cdef double gi, step = lr / c1
    for i in range(n):
        gi = g[i] + weight_decay * p[i]
        m[i] = beta1 * m[i] + (1.0 - beta1) * gi
        v[i] = beta2 * v[i] + (1.0 - beta2) * gi * gi
        p[i] -= step * m[i] / (sqrt(v[i] / c2) + eps)
