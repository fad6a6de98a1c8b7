"""Compiled first-layer and fused output-layer kernels.

Weights are passed transposed (input x hidden) so every first-layer inner
loop is an axpy over the hidden units.
"""

from __future__ import annotations

import numba
import numpy as np

_FM = {"reassoc", "contract", "nsz", "arcp"}



@numba.njit(fastmath=_FM, cache=True)
def first_layer_factorized(x_s, t2, g, wt_s, out):
    """out[r] = t2[g[r]] + W_S x_s[r]."""
    n, d = x_s.shape
    nh = wt_s.shape[1]
    for r in range(n):
        gr = g[r]
        for j in range(nh):
            out[r, j] = t2[gr, j]
        for i in range(d):
            xi = x_s[r, i]
            for j in range(nh):
                out[r, j] += wt_s[i, j] * xi


@numba.njit(fastmath=_FM, cache=True)
def add_gathered(t2, g, out):
    n, nh = out.shape
    for r in range(n):
        gr = g[r]
        for j in range(nh):
            out[r, j] += t2[gr, j]




@numba.njit(fastmath=_FM, cache=True)
def upper_relu(a1, w2, b2, y, n_total, delta, dw2, db0):
    """ReLU hidden layer to one linear output, fused with its backward step.

    Writes dE/da of the first layer into ``delta``, accumulates its column
    sums into ``db0`` and dE/dW2 into ``dw2``, returns ``(sse, dE/db2)``.
    """
    n, nh = a1.shape
    h = np.empty(nh)
    sse = 0.0
    db2 = 0.0
    for r in range(n):
        o = b2
        for j in range(nh):
            v = max(a1[r, j], 0.0)
            h[j] = v
            o += w2[j] * v
        res = o - y[r]
        sse += res * res
        e = res / n_total
        db2 += e
        for j in range(nh):
            dw2[j] += e * h[j]
            dv = e * w2[j] if h[j] > 0.0 else 0.0
            delta[r, j] = dv
            db0[j] += dv
    return sse, db2


def as_f64c(a):
    return np.ascontiguousarray(a, dtype=np.float64)
