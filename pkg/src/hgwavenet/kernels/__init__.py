"""Hot kernels: compiled Cython core with a pure-numpy fallback.

The compiled module is used when it was built and ``HGWAVENET_PURE_PYTHON`` is
not set.  ``BACKEND`` names the active implementation.
"""
import os

import numpy as np

from . import _fallback

_compiled = None
if not os.environ.get("HGWAVENET_PURE_PYTHON"):
    try:
        from . import _attention as _compiled
    except ImportError:
        _compiled = None

BACKEND = "cython" if _compiled is not None else "numpy"


def attention_forward(s, t, u, indptr, indices, logw, slope=0.2):
    """Returns ``(out, weights, pre_activation)`` for the attention aggregation."""
    if _compiled is not None:
        return _compiled.attention_forward(
            np.ascontiguousarray(s, dtype=np.float64),
            np.ascontiguousarray(t, dtype=np.float64),
            np.ascontiguousarray(u, dtype=np.float64),
            indptr, indices,
            np.ascontiguousarray(logw, dtype=np.float64),
            float(slope),
        )
    return _fallback.attention_forward(s, t, u, indptr, indices, logw, slope)


def attention_backward(g, u, indptr, indices, w, pre, slope=0.2):
    """Returns ``(grad_s, grad_t, grad_u)`` given the upstream gradient ``g``."""
    if _compiled is not None:
        return _compiled.attention_backward(
            np.ascontiguousarray(g, dtype=np.float64),
            np.ascontiguousarray(u, dtype=np.float64),
            indptr, indices, w, pre, float(slope),
        )
    return _fallback.attention_backward(g, u, indptr, indices, w, pre, slope)


__all__ = ["BACKEND", "attention_forward", "attention_backward"]
