"""Poincaré-ball geometry at the origin, hardened for 64-bit training.

All functions act row-wise on the last axis and accept plain arrays or
:class:`~hgwavenet.autodiff.Tensor` objects (recorded when a tape is active).
The curvature argument ``c`` is the positive scalar c, as a float or a
scalar tensor; :class:`Curvature` holds the trainable parameterisation.
"""
from __future__ import annotations

import numpy as np

from . import autodiff as ad

BALL_EPS = 1e-5
ATANH_CLAMP = 1.0 - 1e-15
CURVATURE_FLOOR = 1e-6


class NumericalDivergenceError(FloatingPointError):
    """A non-finite value reached the ball projection."""


class Curvature:
    """Trainable curvature: ``c = softplus(raw) + 1e-6``."""

    def __init__(self, c: float = 1.0):
        self.raw = ad.Tensor(self.raw_for(c), requires_grad=True, name="curvature")

    @staticmethod
    def raw_for(c: float) -> float:
        target = c - CURVATURE_FLOOR
        if target <= 0:
            raise ValueError("curvature must exceed the 1e-6 floor")
        # inverse softplus, stable for large targets
        return float(target + np.log(-np.expm1(-target)))

    def c(self):
        return curvature_value(self.raw)

    def __float__(self):
        return float(ad.value(self.c()))


def curvature_value(raw):
    return ad.softplus(raw) + CURVATURE_FLOOR


def _c(c):
    if isinstance(c, Curvature):
        return c.c()
    return c


def project_to_ball(x, c):
    """Rescale rows whose norm exceeds ``(1 - 1e-5)/sqrt(c)`` back onto that radius."""
    c = _c(c)
    xv = ad.value(x)
    if not np.all(np.isfinite(xv)):
        raise NumericalDivergenceError("non-finite coordinates reached project_to_ball")
    return ad.ball_project(x, c)


def conformal_factor(x, c):
    c = _c(c)
    x2 = ad.sum_(ad.mul(x, x), axis=-1, keepdims=True)
    return ad.div(2.0, ad.sub(1.0, ad.mul(c, x2)))


def _mobius_add_raw(x, y, c):
    xy = ad.sum_(ad.mul(x, y), axis=-1, keepdims=True)
    x2 = ad.sum_(ad.mul(x, x), axis=-1, keepdims=True)
    y2 = ad.sum_(ad.mul(y, y), axis=-1, keepdims=True)
    two_c_xy = ad.mul(ad.mul(2.0, c), xy)
    coef_x = ad.add(ad.add(1.0, two_c_xy), ad.mul(c, y2))
    coef_y = ad.sub(1.0, ad.mul(c, x2))
    num = ad.add(ad.mul(coef_x, x), ad.mul(coef_y, y))
    den = ad.add(ad.add(1.0, two_c_xy), ad.mul(ad.mul(c, c), ad.mul(x2, y2)))
    return ad.div(num, den)


def mobius_add(x, y, c):
    c = _c(c)
    return project_to_ball(_mobius_add_raw(x, y, c), c)


def distance(x, y, c):
    """Geodesic distance; returns shape ``(..., 1)`` for row inputs."""
    c = _c(c)
    sc = ad.sqrt(c)
    m = _mobius_add_raw(ad.neg(x), y, c)
    arg = ad.clip(ad.mul(sc, ad.norm(m, eps=0.0)), 0.0, ATANH_CLAMP)
    return ad.mul(ad.div(2.0, sc), ad.atanh(arg))


def exp_map_origin(v, c):
    c = _c(c)
    sc = ad.sqrt(c)
    scaled = ad.mul(sc, ad.norm(v))
    out = ad.mul(ad.div(ad.tanh(scaled), scaled), v)
    return project_to_ball(out, c)


def log_map_origin(y, c):
    c = _c(c)
    sc = ad.sqrt(c)
    scaled = ad.mul(sc, ad.norm(y))
    arg = ad.clip(scaled, 0.0, ATANH_CLAMP)
    return ad.mul(ad.div(ad.atanh(arg), scaled), y)


def mobius_matvec(m, x, c):
    """``exp_o(M log_o(x))`` for rows of ``x`` (computed as ``log_o(x) @ M.T``)."""
    c = _c(c)
    return exp_map_origin(ad.matmul(log_map_origin(x, c), _transpose(m)), c)


def _transpose(m):
    return ad._apply("transpose", m)


ad.defprim("transpose", lambda a: np.transpose(a), lambda g, o, a: (np.transpose(g),))


class PoincareGeometry:
    """Dispatch object so layers can run unchanged on the ball or in flat space."""

    name = "poincare"
    exp0 = staticmethod(exp_map_origin)
    log0 = staticmethod(log_map_origin)
    add = staticmethod(mobius_add)
    matvec = staticmethod(mobius_matvec)
    dist = staticmethod(distance)
    project = staticmethod(project_to_ball)


class EuclideanGeometry:
    """Flat replacement: exp/log are the identity and distance is the Euclidean norm."""

    name = "euclidean"

    @staticmethod
    def exp0(v, c):
        return v

    @staticmethod
    def log0(y, c):
        return y

    @staticmethod
    def add(x, y, c):
        return ad.add(x, y)

    @staticmethod
    def matvec(m, x, c):
        return ad.matmul(x, _transpose(m))

    @staticmethod
    def dist(x, y, c):
        return ad.norm(ad.sub(y, x), eps=0.0)

    @staticmethod
    def project(x, c):
        return x


def geometry(euclidean: bool = False):
    return EuclideanGeometry if euclidean else PoincareGeometry
