# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True
"""Compiled attention aggregation over CSR rows (same contract as _fallback)."""
import numpy as np
cimport numpy as cnp
from libc.math cimport exp, INFINITY

cnp.import_array()


def attention_forward(const double[::1] s, const double[::1] t, const double[:, ::1] u,
                      indptr_, indices_, const double[::1] logw, double slope):
    cdef cnp.int64_t[::1] indptr = np.ascontiguousarray(indptr_, dtype=np.int64)
    cdef cnp.int64_t[::1] indices = np.ascontiguousarray(indices_, dtype=np.int64)
    cdef Py_ssize_t n = u.shape[0], d = u.shape[1], nnz = indices.shape[0]
    out_ = np.zeros((n, d))
    w_ = np.empty(nnz)
    pre_ = np.empty(nnz)
    cdef double[:, ::1] out = out_
    cdef double[::1] w = w_
    cdef double[::1] pre = pre_
    cdef Py_ssize_t i, e, j, k
    cdef double m, p, lg, total, wi
    with nogil:
        for i in range(n):
            if indptr[i] == indptr[i + 1]:
                for k in range(d):
                    out[i, k] = u[i, k]
                continue
            m = -INFINITY
            for e in range(indptr[i], indptr[i + 1]):
                p = s[i] + t[indices[e]]
                pre[e] = p
                lg = (p if p > 0 else slope * p) + logw[e]
                w[e] = lg
                if lg > m:
                    m = lg
            total = 0.0
            for e in range(indptr[i], indptr[i + 1]):
                w[e] = exp(w[e] - m)
                total = total + w[e]
            for e in range(indptr[i], indptr[i + 1]):
                wi = w[e] / total
                w[e] = wi
                j = indices[e]
                for k in range(d):
                    out[i, k] += wi * u[j, k]
    return out_, w_, pre_


def attention_backward(const double[:, ::1] g, const double[:, ::1] u, indptr_, indices_,
                       const double[::1] w, const double[::1] pre, double slope):
    cdef cnp.int64_t[::1] indptr = np.ascontiguousarray(indptr_, dtype=np.int64)
    cdef cnp.int64_t[::1] indices = np.ascontiguousarray(indices_, dtype=np.int64)
    cdef Py_ssize_t n = u.shape[0], d = u.shape[1], nnz = indices.shape[0]
    gs_ = np.zeros(n)
    gt_ = np.zeros(n)
    gu_ = np.zeros((n, d))
    gw_ = np.empty(nnz)
    cdef double[::1] gs = gs_
    cdef double[::1] gt = gt_
    cdef double[:, ::1] gu = gu_
    cdef double[::1] gw = gw_
    cdef Py_ssize_t i, e, j, k
    cdef double acc, dot, gl
    with nogil:
        for i in range(n):
            if indptr[i] == indptr[i + 1]:
                for k in range(d):
                    gu[i, k] += g[i, k]
                continue
            acc = 0.0
            for e in range(indptr[i], indptr[i + 1]):
                j = indices[e]
                dot = 0.0
                for k in range(d):
                    dot = dot + g[i, k] * u[j, k]
                    gu[j, k] += w[e] * g[i, k]
                gw[e] = dot
                acc = acc + w[e] * dot
            for e in range(indptr[i], indptr[i + 1]):
                gl = w[e] * (gw[e] - acc)
                if pre[e] <= 0:
                    gl = slope * gl
                gs[i] += gl
                gt[indices[e]] += gl
    return gs_, gt_, gu_
