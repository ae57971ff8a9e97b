"""Cython implementations of the hot-path kernels.

Mirrors ``py_kernels``; see that module for the shared contract.
"""
import numpy as np

cimport numpy as cnp
from libc.math cimport sqrt

cnp.import_array()

NAME = "cython"


def relu_fwd(double[:, ::1] x):
    cdef Py_ssize_t i, j, n = x.shape[0], m = x.shape[1]
    out_arr = np.empty((n, m), dtype=np.float64)
    cdef double[:, ::1] out = out_arr
    for i in range(n):
        for j in range(m):
            out[i, j] = x[i, j] if x[i, j] > 0.0 else 0.0
    return out_arr


def relu_bwd(double[:, ::1] x, double[:, ::1] g):
    cdef Py_ssize_t i, j, n = x.shape[0], m = x.shape[1]
    out_arr = np.empty((n, m), dtype=np.float64)
    cdef double[:, ::1] out = out_arr
    for i in range(n):
        for j in range(m):
            out[i, j] = g[i, j] if x[i, j] > 0.0 else 0.0
    return out_arr


def sigmoid_fwd(double[:, ::1] x):
    # the transcendental goes through np.exp: libm's exp disagrees with
    # numpy's vectorised one by 1 ulp on some inputs and the two backends
    # must round identically
    cdef Py_ssize_t i, j, n = x.shape[0], m = x.shape[1]
    tmp_arr = np.empty((n, m), dtype=np.float64)
    cdef double[:, ::1] tmp = tmp_arr
    for i in range(n):
        for j in range(m):
            tmp[i, j] = -x[i, j] if x[i, j] >= 0.0 else x[i, j]
    e_arr = np.exp(tmp_arr)
    cdef double[:, ::1] e = e_arr
    cdef double[:, ::1] out = tmp_arr
    for i in range(n):
        for j in range(m):
            if x[i, j] >= 0.0:
                out[i, j] = 1.0 / (1.0 + e[i, j])
            else:
                out[i, j] = e[i, j] / (1.0 + e[i, j])
    return tmp_arr


def sigmoid_bwd(double[:, ::1] out, double[:, ::1] g):
    cdef Py_ssize_t i, j, n = out.shape[0], m = out.shape[1]
    gx_arr = np.empty((n, m), dtype=np.float64)
    cdef double[:, ::1] gx = gx_arr
    for i in range(n):
        for j in range(m):
            gx[i, j] = g[i, j] * out[i, j] * (1.0 - out[i, j])
    return gx_arr


def exp_clamped_fwd(double[:, ::1] x, double lo, double hi):
    # np.exp for cross-backend bit parity, as in sigmoid_fwd
    cdef Py_ssize_t i, j, n = x.shape[0], m = x.shape[1]
    cdef double z
    tmp_arr = np.empty((n, m), dtype=np.float64)
    cdef double[:, ::1] tmp = tmp_arr
    for i in range(n):
        for j in range(m):
            z = x[i, j]
            if z < lo:
                z = lo
            elif z > hi:
                z = hi
            tmp[i, j] = z
    return np.exp(tmp_arr)


def exp_clamped_bwd(double[:, ::1] x, double[:, ::1] out, double[:, ::1] g,
                    double lo, double hi):
    cdef Py_ssize_t i, j, n = x.shape[0], m = x.shape[1]
    gx_arr = np.empty((n, m), dtype=np.float64)
    cdef double[:, ::1] gx = gx_arr
    for i in range(n):
        for j in range(m):
            if lo <= x[i, j] <= hi:
                gx[i, j] = g[i, j] * out[i, j]
            else:
                gx[i, j] = 0.0
    return gx_arr


def segment_sum(double[:, ::1] x, long long[::1] offsets):
    cdef Py_ssize_t s, i, j, nseg = offsets.shape[0] - 1, m = x.shape[1]
    cdef double acc
    out_arr = np.zeros((nseg, m), dtype=np.float64)
    cdef double[:, ::1] out = out_arr
    for s in range(nseg):
        for i in range(offsets[s], offsets[s + 1]):
            for j in range(m):
                out[s, j] += x[i, j]
    return out_arr


def segment_expand(double[:, ::1] s, long long[::1] offsets, Py_ssize_t rows):
    cdef Py_ssize_t k, i, j, nseg = offsets.shape[0] - 1, m = s.shape[1]
    out_arr = np.empty((rows, m), dtype=np.float64)
    cdef double[:, ::1] out = out_arr
    for k in range(nseg):
        for i in range(offsets[k], offsets[k + 1]):
            for j in range(m):
                out[i, j] = s[k, j]
    return out_arr


def segment_max(double[:, ::1] x, long long[::1] offsets):
    cdef Py_ssize_t s, i, j, nseg = offsets.shape[0] - 1, m = x.shape[1]
    vals_arr = np.empty((nseg, m), dtype=np.float64)
    arg_arr = np.empty((nseg, m), dtype=np.int64)
    cdef double[:, ::1] vals = vals_arr
    cdef long long[:, ::1] arg = arg_arr
    for s in range(nseg):
        i = offsets[s]
        for j in range(m):
            vals[s, j] = x[i, j]
            arg[s, j] = i
        for i in range(offsets[s] + 1, offsets[s + 1]):
            for j in range(m):
                if x[i, j] > vals[s, j]:
                    vals[s, j] = x[i, j]
                    arg[s, j] = i
    return vals_arr, arg_arr


def segment_min(double[:, ::1] x, long long[::1] offsets):
    cdef Py_ssize_t s, i, j, nseg = offsets.shape[0] - 1, m = x.shape[1]
    vals_arr = np.empty((nseg, m), dtype=np.float64)
    arg_arr = np.empty((nseg, m), dtype=np.int64)
    cdef double[:, ::1] vals = vals_arr
    cdef long long[:, ::1] arg = arg_arr
    for s in range(nseg):
        i = offsets[s]
        for j in range(m):
            vals[s, j] = x[i, j]
            arg[s, j] = i
        for i in range(offsets[s] + 1, offsets[s + 1]):
            for j in range(m):
                if x[i, j] < vals[s, j]:
                    vals[s, j] = x[i, j]
                    arg[s, j] = i
    return vals_arr, arg_arr


def scatter_rows_add(double[:, ::1] g, long long[:, ::1] arg, Py_ssize_t rows):
    cdef Py_ssize_t s, j, nseg = g.shape[0], m = g.shape[1]
    gx_arr = np.zeros((rows, m), dtype=np.float64)
    cdef double[:, ::1] gx = gx_arr
    for s in range(nseg):
        for j in range(m):
            gx[arg[s, j], j] += g[s, j]
    return gx_arr


def adam_update(double[::1] p, double[::1] g, double[::1] m, double[::1] v,
                double lr, double beta1, double beta2, double eps, long long t):
    cdef Py_ssize_t i, n = p.shape[0]
    cdef double c1 = 1.0 - beta1 ** t
    cdef double c2 = 1.0 - beta2 ** t
    cdef double mhat, vhat
    for i in range(n):
        m[i] = beta1 * m[i] + (1.0 - beta1) * g[i]
        v[i] = beta2 * v[i] + (1.0 - beta2) * g[i] * g[i]
        mhat = m[i] / c1
        vhat = v[i] / c2
        p[i] -= lr * mhat / (sqrt(vhat) + eps)
