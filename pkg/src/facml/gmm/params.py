"""Mixture parameters, precisions and the (factorized) quadratic forms."""

from __future__ import annotations

import itertools
from dataclasses import dataclass, field

import numpy as np
from scipy.linalg import LinAlgError, cho_factor, cho_solve

from ..errors import ShapeError, SingularCovariance, StaleCache

LOG_2PI = np.log(2.0 * np.pi)
RIDGE_START = 1e-6
RIDGE_MAX = 1e-2

_versions = itertools.count(1)


@dataclass
class GmmParams:
    pi: np.ndarray      # (K,)
    mu: np.ndarray      # (K, d)
    sigma: np.ndarray   # (K, d, d)

    def __post_init__(self):
        self.pi = np.asarray(self.pi, dtype=np.float64)
        self.mu = np.atleast_2d(np.asarray(self.mu, dtype=np.float64))
        self.sigma = np.asarray(self.sigma, dtype=np.float64)
        K, d = self.mu.shape
        if self.pi.shape != (K,) or self.sigma.shape != (K, d, d):
            raise ShapeError(
                f"inconsistent shapes pi{self.pi.shape} mu{self.mu.shape} sigma{self.sigma.shape}")

    @property
    def K(self):
        return len(self.pi)

    @property
    def d(self):
        return self.mu.shape[1]

    def copy(self):
        return GmmParams(self.pi.copy(), self.mu.copy(), self.sigma.copy())

    def to_dict(self):
        return {"pi": self.pi.tolist(), "mu": self.mu.tolist(), "sigma": self.sigma.tolist()}

    @classmethod
    def from_dict(cls, d):
        return cls(np.array(d["pi"]), np.array(d["mu"]), np.array(d["sigma"]))


def _ridge_scale(s):
    t = np.trace(s) / len(s)
    return t if t > 0 else 1.0


def regularize(sigma):
    """Return ``(sigma + eps I, eps)`` with eps = 1e-6 * trace/d.

    The ridge grows tenfold, up to 1e-2 * trace/d, while Cholesky fails.
    """
    sigma = np.asarray(sigma, dtype=np.float64)
    scale = _ridge_scale(sigma)
    eye = np.eye(len(sigma))
    eps = RIDGE_START
    while eps <= RIDGE_MAX * (1 + 1e-9):
        trial = sigma + eps * scale * eye
        try:
            cho_factor(trial, lower=True)
            return trial, eps * scale
        except LinAlgError:
            eps *= 10
    raise SingularCovariance(f"covariance not SPD even with ridge {RIDGE_MAX} * trace/d")


@dataclass
class ComponentPrecision:
    """Precision matrices I_k, log-determinants and the table partition."""

    precision: np.ndarray   # (K, d, d)
    log_det: np.ndarray     # (K,) of log|Sigma_k|
    offsets: np.ndarray     # block boundaries, offsets[0] = 0, offsets[-1] = d
    version: int = field(default_factory=lambda: next(_versions))

    @property
    def K(self):
        return len(self.log_det)

    @property
    def d(self):
        return self.precision.shape[1]

    @property
    def n_blocks(self):
        return len(self.offsets) - 1

    def block(self, k, m, n):
        o = self.offsets
        return self.precision[k, o[m]:o[m + 1], o[n]:o[n + 1]]

    def normalizer(self, k=None):
        """-1/2 (d log 2 pi + log|Sigma_k|)."""
        ld = self.log_det if k is None else self.log_det[k]
        return -0.5 * (self.d * LOG_2PI + ld)


def precompute_precision(params, offsets=None):
    """Cholesky-based I_k = Sigma_k^-1 and log|Sigma_k| for every component."""
    K, d = params.K, params.d
    offsets = np.asarray([0, d] if offsets is None else offsets, dtype=np.int64)
    if offsets[0] != 0 or offsets[-1] != d or np.any(np.diff(offsets) <= 0):
        raise ShapeError(f"offsets {offsets.tolist()} do not tile dimension {d}")
    prec = np.empty((K, d, d))
    log_det = np.empty(K)
    eye = np.eye(d)
    for k in range(K):
        s, _ = regularize(params.sigma[k])
        c = cho_factor(s, lower=True)
        p = cho_solve(c, eye)
        prec[k] = 0.5 * (p + p.T)
        log_det[k] = 2.0 * np.sum(np.log(np.diag(c[0])))
    return ComponentPrecision(prec, log_det, offsets)


def _check_vec(v, n, what):
    v = np.asarray(v, dtype=np.float64)
    if v.shape != (n,):
        raise ShapeError(f"{what} has shape {v.shape}, expected ({n},)")
    return v


def quadform_direct(x, mu, I):
    """(x - mu)^T I (x - mu)."""
    I = np.asarray(I, dtype=np.float64)
    if I.ndim != 2 or I.shape[0] != I.shape[1]:
        raise ShapeError(f"precision must be square, got {I.shape}")
    d = I.shape[0]
    pd = _check_vec(x, d, "x") - _check_vec(mu, d, "mu")
    return float(pd @ I @ pd)


def rowquad(pd, I):
    """Row-wise pd_n^T I pd_n for a matrix of deviations."""
    return np.einsum("ij,ij->i", pd @ I, pd)


def gaussian_logpdf(quadform, prec, k):
    """log N(x | mu_k, Sigma_k) given the quadratic form."""
    return prec.normalizer(k) - 0.5 * quadform


@dataclass
class RTupleCacheGMM:
    """Per-R-tuple, per-component reusable quantities of one attribute table.

    ``pd[k]`` holds PD_R for every tuple, ``lr[k]`` the scalar
    PD_R^T I_RR PD_R and ``cross[k]`` the vector I_SR PD_R.  ``table`` is the
    block index of the table in the precision partition (1..q).
    """

    table: int
    pd: np.ndarray        # (K, n, d_R)
    lr: np.ndarray        # (K, n)
    cross: np.ndarray     # (K, n, d_S)
    version: int
    gamma_sum: np.ndarray | None = None         # (n, K), M-step bookkeeping
    weighted_pds_sum: np.ndarray | None = None  # (K, n, d_S)

    def check(self, prec):
        if self.version != prec.version:
            raise StaleCache(
                f"cache built for precision v{self.version}, current is v{prec.version}")


def build_rtuple_cache(x_r, mu, prec, table=1):
    """Compute PD_R, lr and cross for every row of ``x_r`` and every component."""
    x_r = np.atleast_2d(np.asarray(x_r, dtype=np.float64))
    o = prec.offsets
    lo, hi = o[table], o[table + 1]
    if x_r.shape[1] != hi - lo:
        raise ShapeError(f"R block width {x_r.shape[1]} != partition width {hi - lo}")
    K = prec.K
    pd = x_r[None, :, :] - np.asarray(mu)[:, None, lo:hi]
    lr = np.empty((K, len(x_r)))
    cross = np.empty((K, len(x_r), o[1]))
    for k in range(K):
        lr[k] = rowquad(pd[k], prec.block(k, table, table))
        cross[k] = pd[k] @ prec.block(k, table, 0)
    return RTupleCacheGMM(table, pd, lr, cross, prec.version)


def quadform_factorized(pd_s, cache, r, k, prec):
    """UL + 2 UR + LR using cached (cross, lr) for R tuple ``r``."""
    cache.check(prec)
    I_ss = prec.block(k, 0, 0)
    pd_s = _check_vec(pd_s, I_ss.shape[0], "pd_s")
    ul = pd_s @ I_ss @ pd_s
    ur = pd_s @ cache.cross[k, r]
    return float(ul + 2.0 * ur + cache.lr[k, r])


def quadform_blocks(pd_blocks, I, offsets):
    """Sum over i, j of PD_i^T I_ij PD_j for deviations split by ``offsets``."""
    offsets = np.asarray(offsets)
    if len(pd_blocks) != len(offsets) - 1:
        raise ShapeError(f"{len(pd_blocks)} deviation blocks for {len(offsets) - 1} partitions")
    total = 0.0
    for i, pi in enumerate(pd_blocks):
        pi = _check_vec(pi, offsets[i + 1] - offsets[i], f"block {i}")
        for j, pj in enumerate(pd_blocks):
            pj = np.asarray(pj, dtype=np.float64)
            if pj.shape != (offsets[j + 1] - offsets[j],):
                raise ShapeError(f"block {j} has shape {pj.shape}")
            total += pi @ I[offsets[i]:offsets[i + 1], offsets[j]:offsets[j + 1]] @ pj
    return float(total)


def quadform_multiway(pd_s, caches, rows, k, prec):
    """Quadratic form for a star join of q tables from per-table caches.

    Diagonal R blocks and S-R cross terms come from the caches; the R_i-R_j
    cross terms are evaluated from the cached deviations.
    """
    if len(caches) != len(rows) or len(caches) != prec.n_blocks - 1:
        raise ShapeError("need one cache and one row index per attribute table")
    for c in caches:
        c.check(prec)
    I_ss = prec.block(k, 0, 0)
    pd_s = _check_vec(pd_s, I_ss.shape[0], "pd_s")
    total = pd_s @ I_ss @ pd_s
    for c, r in zip(caches, rows):
        total += 2.0 * (pd_s @ c.cross[k, r]) + c.lr[k, r]
    for a in range(len(caches)):
        for b in range(a + 1, len(caches)):
            ca, cb = caches[a], caches[b]
            total += 2.0 * (ca.pd[k, rows[a]] @ prec.block(k, ca.table, cb.table)
                            @ cb.pd[k, rows[b]])
    return float(total)
