"""Compiled depthwise convolution loops.

The depthwise convolutions dominate the cost of every forward and backward
pass. These loops are compiled with numba when it is importable; otherwise
the callers fall back to the vectorised numpy versions in ``numkernel``.
"""

from __future__ import annotations

import numpy as np

try:
    from numba import njit
except ImportError:  # pragma: no cover - exercised only without numba
    njit = None


if njit is not None:

    @njit(cache=True)
    def depthwise_fwd(xp, w, stride, dil, ho, wo):
        n, c = xp.shape[0], xp.shape[1]
        k = w.shape[2]
        out = np.zeros((n, c, ho, wo))
        for i in range(n):
            for ch in range(c):
                for a in range(k):
                    for b in range(k):
                        wt = w[ch, a, b]
                        oa, ob = a * dil, b * dil
                        for y in range(ho):
                            row = oa + y * stride
                            for x in range(wo):
                                out[i, ch, y, x] += wt * xp[i, ch, row, ob + x * stride]
        return out

    @njit(cache=True)
    def depthwise_bwd(g, xp, w, stride, dil):
        n, c, ho, wo = g.shape
        k = w.shape[2]
        gw = np.zeros_like(w)
        gxp = np.zeros_like(xp)
        for i in range(n):
            for ch in range(c):
                for a in range(k):
                    for b in range(k):
                        wt = w[ch, a, b]
                        oa, ob = a * dil, b * dil
                        acc = 0.0
                        for y in range(ho):
                            row = oa + y * stride
                            for x in range(wo):
                                gv = g[i, ch, y, x]
                                acc += gv * xp[i, ch, row, ob + x * stride]
                                gxp[i, ch, row, ob + x * stride] += wt * gv
                        gw[ch, a, b] += acc
        return gxp, gw

else:
    depthwise_fwd = depthwise_bwd = None

AVAILABLE = njit is not None
