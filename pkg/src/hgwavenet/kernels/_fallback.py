"""Pure-numpy attention aggregation over CSR rows."""
import numpy as np


def _rows_of(indptr, nnz):
    n = len(indptr) - 1
    return np.repeat(np.arange(n), np.diff(indptr)), n


def attention_forward(s, t, u, indptr, indices, logw, slope):
    rows, n = _rows_of(indptr, len(indices))
    pre = s[rows] + t[indices]
    logits = np.where(pre > 0, pre, slope * pre) + logw
    counts = np.diff(indptr)
    nonempty = counts > 0
    rowmax = np.full(n, -np.inf)
    if len(indices):
        rowmax[nonempty] = np.maximum.reduceat(logits, indptr[:-1][nonempty])
    ex = np.exp(logits - rowmax[rows])
    denom = np.bincount(rows, weights=ex, minlength=n)
    w = ex / denom[rows]
    out = np.zeros_like(u)
    np.add.at(out, rows, w[:, None] * u[indices])
    out[~nonempty] = u[~nonempty]
    return out, w, pre


def attention_backward(g, u, indptr, indices, w, pre, slope):
    rows, n = _rows_of(indptr, len(indices))
    gw = np.einsum("ij,ij->i", g[rows], u[indices])
    gu = np.zeros_like(u)
    np.add.at(gu, indices, w[:, None] * g[rows])
    empty = np.diff(indptr) == 0
    gu[empty] += g[empty]
    acc = np.bincount(rows, weights=w * gw, minlength=n)
    glogit = w * (gw - acc[rows])
    gpre = np.where(pre > 0, glogit, slope * glogit)
    gs = np.bincount(rows, weights=gpre, minlength=n)
    gt = np.bincount(indices, weights=gpre, minlength=n)
    return gs, gt, gu
