"""Adaptive-moment SGD over dicts of (real or complex) parameter arrays.

Complex arrays are updated through their float64 views: under the
real-pairing convention used package-wide (dL = Re <g, dx>), the float view
of a complex gradient is exactly the gradient of the float view of the
parameter, so Adam's per-coordinate scaling applies unchanged.
"""

from __future__ import annotations

import numpy as np


class DivergenceError(RuntimeError):
    """Raised when an optimization loss turns non-finite."""


def _float_view(a: np.ndarray) -> np.ndarray:
    return a.view(np.float64) if np.iscomplexobj(a) else a


class Adam:
    def __init__(self, params: dict[str, np.ndarray], lr: float = 1e-3,
                 beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.t = 0
        self.m = {k: np.zeros_like(_float_view(v)) for k, v in params.items()}
        self.v = {k: np.zeros_like(_float_view(v)) for k, v in params.items()}

    def step(self, params: dict[str, np.ndarray], grads: dict[str, np.ndarray]):
        """Update params in place; grads share the params' keys."""
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        bias1 = 1.0 - b1**self.t
        bias2 = 1.0 - b2**self.t
        for k, p in params.items():
            g = np.asarray(grads[k])
            if np.iscomplexobj(g) and not g.flags.c_contiguous:
                g = np.ascontiguousarray(g)
            g = _float_view(g)
            if not np.isfinite(g).all():
                raise DivergenceError(f"non-finite gradient for '{k}'")
            m = self.m[k]
            v = self.v[k]
            m *= b1
            m += (1 - b1) * g
            v *= b2
            v += (1 - b2) * g * g
            upd = (self.lr / bias1) * m / (np.sqrt(v / bias2) + self.eps)
            _float_view(p)[...] -= upd
