"""Hyperbolic building blocks: HGCN pieces, diffusion convolution, dilated causal
convolution with gating, and the tangent-space GRU cell.

Every function takes a ``geom`` dispatch object (``PoincareGeometry`` or
``EuclideanGeometry``) first so the flat ablation shares all wiring.  Node
representations are ``(N, d)`` arrays or tensors of ball points; curvatures are
scalar values (``Curvature.c()`` results or floats).
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp

from . import autodiff as ad
from .manifold import PoincareGeometry, curvature_value as _curv

LEAKY_SLOPE = 0.2


@dataclass
class HDGCLayerParams:
    """Per diffusion step: ``W[k]`` (d, d), tangent bias ``b[k]`` (d,), raw step curvature."""

    W: list
    b: list
    c_step: list
    a_nbr: object  # (2d,)
    a_step: object  # (d,)
    c_out: object  # raw layer curvature

    @property
    def K(self) -> int:
        return len(self.W) - 1


@dataclass
class HDCCKernel:
    F: object  # (S, d) depthwise taps
    dilation: int


@dataclass
class GatedLayerParams:
    filt: object  # (S, d)
    gate: object  # (S, d)
    dilation: int


@dataclass
class HGRUParams:
    Wz: object
    Uz: object
    bz: object
    Wr: object
    Ur: object
    br: object
    Wh: object
    Uh: object
    bh: object


def dilation_schedule(num_layers: int, S: int, D: int) -> list[int]:
    """Dilations S^0 .. S^(D-1) repeated over ``num_layers`` gated layers."""
    return [S ** (i % D) for i in range(num_layers)]


def receptive_field(dilations, S: int) -> int:
    return 1 + sum((S - 1) * d for d in dilations)


# ----------------------------------------------------------------------------- HGCN parts

def hyperbolic_linear(x, W, b, c, geom=PoincareGeometry, bias_is_tangent: bool = False):
    """``(W ⊗_c x) ⊕_c b``; with ``bias_is_tangent`` the bias is exp-mapped first."""
    h = geom.matvec(W, x, c)
    bias = geom.exp0(b, c) if bias_is_tangent else b
    return geom.add(h, bias, c)


def _csr_parts(a):
    a = sp.csr_matrix(a)
    a.sort_indices()
    indptr = a.indptr.astype(np.int64)
    indices = a.indices.astype(np.int64)
    with np.errstate(divide="ignore"):
        logw = np.log(a.data.astype(np.float64))
    return indptr, indices, logw


def neighbor_aggregate(H, A_k, a_nbr, c_in, c_out, geom=PoincareGeometry, parts=None):
    """Attention over the nonzero pattern of ``A_k``; scores are reweighted by ``A_k`` entries."""
    u = geom.log0(H, c_in)
    d = ad.value(u).shape[-1]
    s = ad.matmul(u, ad.take(a_nbr, slice(0, d)))
    t = ad.matmul(u, ad.take(a_nbr, slice(d, 2 * d)))
    indptr, indices, logw = parts if parts is not None else _csr_parts(A_k)
    agg = ad.attention_aggregate(s, t, u, indptr, indices, logw, slope=LEAKY_SLOPE)
    return geom.exp0(agg, c_out)


def hyperbolic_activation(y, c_in, c_out, geom=PoincareGeometry):
    return geom.exp0(ad.leaky_relu(geom.log0(y, c_in), LEAKY_SLOPE), c_out)


def hdgc_step(A_k, X_prev, W, b, a_nbr, c_prev, c_k, geom=PoincareGeometry, parts=None):
    """One HGCN pass over the k-th adjacency power: transform, aggregate, activate.

    The whole step lives on the ball of curvature ``c_k``: the input is moved
    there first, so the Mobius bias addition is where ``c_k`` takes effect.
    """
    x = geom.exp0(geom.log0(X_prev, c_prev), c_k)
    h = hyperbolic_linear(x, W, b, c_k, geom, bias_is_tangent=True)
    y = neighbor_aggregate(h, A_k, a_nbr, c_k, c_k, geom, parts)
    return hyperbolic_activation(y, c_k, c_k, geom)


def hdgc_layer(stack, X_prev, p: HDGCLayerParams, c_prev, geom=PoincareGeometry, parts=None):
    """Run every diffusion step and fuse the step outputs by per-node attention."""
    if parts is None:
        parts = [_csr_parts(a) for a in stack.powers]
    tangents = []
    for k in range(p.K + 1):
        ck = _curv(p.c_step[k])
        Xk = hdgc_step(stack.powers[k], X_prev, p.W[k], p.b[k], p.a_nbr, c_prev, ck, geom, parts[k])
        tangents.append(geom.log0(Xk, ck))
    c_out = _curv(p.c_out)
    if len(tangents) == 1:
        return geom.exp0(tangents[0], c_out)
    V = ad.stack(tangents, axis=0)  # (K+1, N, d)
    scores = ad.matmul(V, p.a_step)  # (K+1, N)
    w = ad.softmax(scores, axis=0)
    shape = ad.value(w).shape + (1,)
    fused = ad.sum_(ad.mul(ad.reshape(w, shape), V), axis=0)
    return geom.exp0(fused, c_out)


def hdgc_forward(stack, X_in, layers, c_in, geom=PoincareGeometry, parts=None):
    """Sequential composition of HDGC layers; returns ``(X_out, c_out_value)``."""
    X, c = X_in, c_in
    for p in layers:
        X = hdgc_layer(stack, X, p, c, geom, parts)
        c = _curv(p.c_out)
    return X, c


# ----------------------------------------------------------------------------- temporal

def _shift(V, k):
    """Delay a (T, N, d) sequence by ``k`` positions, filling with the origin tangent (zeros)."""
    if k == 0:
        return V
    T = ad.value(V).shape[0]
    if k >= T:
        return np.zeros(ad.value(V).shape)
    pad = np.zeros((k,) + ad.value(V).shape[1:])
    return ad.concat([pad, ad.take(V, slice(0, T - k))], axis=0)


def causal_conv_tangent(V, F, dilation: int):
    """``sum_s F[s] * V[t - dilation*s]`` at every position of a tangent sequence."""
    S = ad.value(F).shape[0]
    out = None
    for s in range(S):
        term = ad.mul(_shift(V, dilation * s), ad.take(F, s))
        out = term if out is None else ad.add(out, term)
    return out


def hdcc_sequence(P, F, dilation, c, geom=PoincareGeometry):
    """Dilated causal convolution of a (T, N, d) point sequence; returns points."""
    return geom.exp0(causal_conv_tangent(geom.log0(P, c), F, dilation), c)


def hdcc_apply(history, kernel: HDCCKernel, t: int, c, geom=PoincareGeometry):
    """Convolution output at position ``t`` of a chronological list/array of (N, d) points."""
    P = ad.stack(list(history), axis=0) if isinstance(history, (list, tuple)) else history
    P = ad.take(P, slice(0, t + 1))
    return ad.take(hdcc_sequence(P, kernel.F, kernel.dilation, c, geom), t)


def _gated_tangent(V, F1, F2, dilation, c, geom):
    filt = geom.exp0(causal_conv_tangent(V, F1, dilation), c)
    gate = geom.exp0(causal_conv_tangent(V, F2, dilation), c)
    return ad.mul(ad.tanh(geom.log0(filt, c)), ad.sigmoid(geom.log0(gate, c)))


def gated_hdcc_layer(history, F1, F2, dilation: int, t: int, c, geom=PoincareGeometry):
    """Gated output ``exp(tanh(log filt) * sigmoid(log gate))`` at position ``t``."""
    P = ad.stack(list(history), axis=0) if isinstance(history, (list, tuple)) else history
    P = ad.take(P, slice(0, t + 1))
    g = _gated_tangent(geom.log0(P, c), F1, F2, dilation, c, geom)
    return geom.exp0(ad.take(g, t), c)


def gated_hdcc_stack(P, layers, c, geom=PoincareGeometry):
    """Hidden state at the last position of a chronological (T, N, d) point sequence.

    Residual: the next layer sees ``exp(log P + gated)``.  Skip: the gated
    tangents of all layers are summed and the result exp-mapped.
    """
    V = geom.log0(P, c)
    skip = None
    for i, lp in enumerate(layers):
        g = _gated_tangent(V, lp.filt, lp.gate, lp.dilation, c, geom)
        last = ad.take(g, -1)
        skip = last if skip is None else ad.add(skip, last)
        if i + 1 < len(layers):
            V = geom.log0(geom.exp0(ad.add(V, g), c), c)
    return geom.exp0(skip, c)


def attention_pool_history(P, a_hist, c, geom=PoincareGeometry):
    """Window-limited attention pooling of a (T, N, d) history (the no-HDCC variant)."""
    V = geom.log0(P, c)
    scores = ad.matmul(V, a_hist)  # (T, N)
    w = ad.softmax(scores, axis=0)
    pooled = ad.sum_(ad.mul(ad.reshape(w, ad.value(w).shape + (1,)), V), axis=0)
    return geom.exp0(pooled, c)


def hgru_cell(X, H_prev, p: HGRUParams, c_x, c_h, c_out=None, geom=PoincareGeometry):
    """GRU step in the origin tangent space: inputs log-mapped, output exp-mapped."""
    c_out = c_h if c_out is None else c_out
    u = geom.log0(X, c_x)
    h = geom.log0(H_prev, c_h)

    def lin(W, U, b, a, bb):
        return ad.add(ad.add(ad.matmul(a, ad._apply("transpose", W)),
                             ad.matmul(bb, ad._apply("transpose", U))), b)

    z = ad.sigmoid(lin(p.Wz, p.Uz, p.bz, u, h))
    r = ad.sigmoid(lin(p.Wr, p.Ur, p.br, u, h))
    cand = ad.tanh(lin(p.Wh, p.Uh, p.bh, u, ad.mul(r, h)))
    new = ad.add(ad.mul(ad.sub(1.0, z), h), ad.mul(z, cand))
    return geom.exp0(new, c_out)
