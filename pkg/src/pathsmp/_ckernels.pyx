# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True
"""Compiled loops for the path-derivative operator and its adjoint.

Shapes (all C-contiguous float64):
  ker  (Pk, n1, a, dF, dE)  kernel per path (Pk = 1 or P), node, atom
  lags (a,) int64 (<= 0), w (a,)
  Z    (P, L, dE) state path on nodes -k .. n1-1 (L = k + n1)
  Q    (P, n1, dF)
"""
import numpy as np
cimport numpy as cnp

cnp.import_array()


def rho_apply(double[:, :, :, :, ::1] ker, long long[::1] lags, double[::1] w,
              double[:, :, ::1] Z, int k):
    cdef Py_ssize_t Pk = ker.shape[0], n1 = ker.shape[1], a = ker.shape[2]
    cdef Py_ssize_t dF = ker.shape[3], dE = ker.shape[4], P = Z.shape[0]
    cdef Py_ssize_t p, pk, n, i, r, c, src
    cdef double acc, wi
    out = np.zeros((P, n1, dF))
    cdef double[:, :, ::1] o = out
    for p in range(P):
        pk = p if Pk > 1 else 0
        for n in range(n1):
            for i in range(a):
                wi = w[i]
                if wi == 0.0:
                    continue
                src = n + lags[i] + k
                for r in range(dF):
                    acc = 0.0
                    for c in range(dE):
                        acc = acc + ker[pk, n, i, r, c] * Z[p, src, c]
                    o[p, n, r] += wi * acc
    return out


def rho_star_scatter(double[:, :, :, :, ::1] ker, long long[::1] lags, double[::1] w,
                     double[:, :, ::1] Q, int k):
    cdef Py_ssize_t Pk = ker.shape[0], n1 = ker.shape[1], a = ker.shape[2]
    cdef Py_ssize_t dF = ker.shape[3], dE = ker.shape[4], P = Q.shape[0]
    cdef Py_ssize_t p, pk, n, i, r, c, dst
    cdef double wi, qr
    out = np.zeros((P, n1 + k, dE))
    cdef double[:, :, ::1] o = out
    for p in range(P):
        pk = p if Pk > 1 else 0
        for n in range(n1):
            for i in range(a):
                wi = w[i]
                if wi == 0.0:
                    continue
                dst = n + lags[i] + k
                for r in range(dF):
                    qr = wi * Q[p, n, r]
                    for c in range(dE):
                        o[p, dst, c] += ker[pk, n, i, r, c] * qr
    return out


def rho_star_gather(double[:, :, :, :, ::1] ker, long long[::1] lags, double[::1] w,
                    double[:, :, ::1] Q, int k):
    cdef Py_ssize_t Pk = ker.shape[0], n1 = ker.shape[1], a = ker.shape[2]
    cdef Py_ssize_t dF = ker.shape[3], dE = ker.shape[4], P = Q.shape[0]
    cdef Py_ssize_t p, pk, u, i, r, c, src
    cdef double wi, acc
    out = np.zeros((P, n1 + k, dE))
    cdef double[:, :, ::1] o = out
    for p in range(P):
        pk = p if Pk > 1 else 0
        for u in range(n1 + k):
            # node u - k reads the kernel at node (u - k) - lag
            for i in range(a):
                wi = w[i]
                src = u - k - lags[i]
                if wi == 0.0 or src < 0 or src >= n1:
                    continue
                for c in range(dE):
                    acc = 0.0
                    for r in range(dF):
                        acc = acc + ker[pk, src, i, r, c] * Q[p, src, r]
                    o[p, u, c] += wi * acc
    return out
