"""Compiled per-row kernels of the factorized E-step and covariance pass.

Per-table arrays are passed as tuples indexed by attribute table, with
``g[r, i]`` the row of table i joined to S row r.
"""

from __future__ import annotations

import numba
import numpy as np

_FM = {"reassoc", "contract", "nsz", "arcp"}


@numba.njit(fastmath=_FM, cache=True)
def factorized_quad(xs, mu_s, iss, crosses, lrs, g, out):
    """out[r, k] = PD_S^T I_SS PD_S + 2 PD_S . sum_i cross_i + sum_i lr_i."""
    n, d_s = xs.shape
    K = mu_s.shape[0]
    q = len(crosses)
    pd = np.empty(d_s)
    for r in range(n):
        for k in range(K):
            for a in range(d_s):
                pd[a] = xs[r, a] - mu_s[k, a]
            quad = 0.0
            for a in range(d_s):
                t = 0.0
                for b in range(d_s):
                    t += iss[k, a, b] * pd[b]
                quad += pd[a] * t
            cr = 0.0
            lr = 0.0
            for i in range(q):
                gi = g[r, i]
                c = crosses[i]
                for a in range(d_s):
                    cr += pd[a] * c[k, gi, a]
                lr += lrs[i][k, gi]
            out[r, k] = quad + 2.0 * cr + lr


@numba.njit(fastmath=_FM, cache=True)
def scatter_groups(xs, gam, mu_s, g, gss, wss):
    """Per-tuple sums of gamma_k and gamma_k (x_S - mu_S,k) for every table."""
    n, d_s = xs.shape
    K = gam.shape[1]
    q = len(gss)
    for r in range(n):
        for i in range(q):
            gi = g[r, i]
            gs = gss[i]
            ws = wss[i]
            for k in range(K):
                w = gam[r, k]
                gs[k, gi] += w
                for a in range(d_s):
                    ws[k, gi, a] += w * (xs[r, a] - mu_s[k, a])
