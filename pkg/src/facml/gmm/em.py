"""EM for full-covariance mixtures over materialized, streamed or factorized joins.

Every iteration makes three passes over the data, as in the classical
batched formulation: the E-step, the mean pass, and the covariance pass
using the freshly updated means.  Responsibilities are held in memory in S
storage order, which is also T's row order, so all strategies sum in the
same canonical order.

Operation counts are reported per pass at the kernel boundary:
``subs`` for deviations x - mu, ``mults`` for products inside quadratic
forms and outer products, ``weights`` for scaling by gamma.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np
from scipy.special import logsumexp

from ..counters import OpCounter, delta, time_delta_ms
from ..errors import ShapeError
from . import _kernels as KR
from .params import GmmParams, build_rtuple_cache, precompute_precision, rowquad

EMPTY_FRACTION = 1e-10
SIGMA_MODES = ("grouped", "paper")


@dataclass
class Responsibilities:
    gamma: np.ndarray   # (N, K), rows in S storage order
    Nk: np.ndarray
    loglik: float


@dataclass
class GmmConfig:
    K: int = 3
    tol: float = 1e-4
    max_iters: int = 100
    seed: int = 0
    sigma_mode: str = "grouped"
    record_params: bool = False
    cache_hook: object = None   # called on every freshly built F-side cache

    def __post_init__(self):
        if self.K < 1:
            raise ShapeError("K must be >= 1")
        if self.max_iters < 1:
            raise ShapeError("max_iters must be >= 1")
        if self.sigma_mode not in SIGMA_MODES:
            raise ShapeError(f"sigma_mode must be one of {SIGMA_MODES}")

    def to_dict(self):
        return {"K": self.K, "tol": self.tol, "max_iters": self.max_iters, "seed": self.seed,
                "sigma_mode": self.sigma_mode}


@dataclass
class TrainTrace:
    strategy: str
    iterations: list = field(default_factory=list)
    converged: bool = False
    meta: dict = field(default_factory=dict)
    params: list = field(default_factory=list)   # snapshots, not serialized

    @property
    def logliks(self):
        return [it["loglik"] for it in self.iterations]

    def to_dict(self):
        return {"strategy": self.strategy, "converged": self.converged, "meta": self.meta,
                "iterations": self.iterations}

    def write_json(self, path):
        with open(path, "w") as fh:
            json.dump(self.to_dict(), fh, indent=2)


def offsets_of(source):
    return np.concatenate([[0], np.cumsum(source.widths)]).astype(np.int64)


def _rowdot(a, b):
    return np.einsum("ij,ij->i", a, b)


def _group_sum(g, w, n):
    """Per-group column sums of ``w`` (rows grouped by ``g``)."""
    m = w.shape[1]
    idx = (np.asarray(g, dtype=np.int64)[:, None] * m + np.arange(m)).ravel()
    return np.bincount(idx, weights=w.ravel(), minlength=n * m).reshape(n, m)


# ---------------------------------------------------------------------------
# E-step


def estep(source, params, prec, counter=None, cache_hook=None):
    """Responsibilities and log-likelihood for every join row."""
    counter = counter if counter is not None else OpCounter()
    K, d = params.K, params.d
    log_r = np.empty((source.n_rows, K))
    base = np.log(params.pi) + prec.normalizer()
    with counter.timed("estep"):
        if source.kind == "F":
            _estep_factorized(source, params, prec, counter, cache_hook, log_r, base)
        else:
            for ch in source.passes(counter, "estep"):
                n = len(ch)
                for k in range(K):
                    pd = ch.x - params.mu[k]
                    log_r[ch.ordinals, k] = base[k] - 0.5 * rowquad(pd, prec.precision[k])
                counter.add("estep", subs=K * n * d, mults=K * n * (d * d + d))
        ll_rows = logsumexp(log_r, axis=1)
        gamma = np.exp(log_r - ll_rows[:, None])
    return Responsibilities(gamma, gamma.sum(axis=0), float(ll_rows.sum()))


def _pair_tables(caches, a, b, k, prec):
    """Cache for the R_a-R_b cross term, dotted over the narrower side.

    Returns ``(narrow, V)`` where the per-row term is
    ``pd_narrow[g_narrow] . V[g_other]``.
    """
    ca, cb = caches[a], caches[b]
    if ca.pd.shape[2] <= cb.pd.shape[2]:
        return a, cb.pd[k] @ prec.block(k, cb.table, ca.table)
    return b, ca.pd[k] @ prec.block(k, ca.table, cb.table)


def _estep_factorized(source, params, prec, counter, hook, log_r, base):
    K = params.K
    d_s = source.widths[0]
    q = len(source.widths) - 1
    static, static_pairs = {}, {}
    for block in source.passes(counter, "estep"):
        caches = []
        for i, tab in enumerate(block.tables):
            if i >= 1 and i in static:
                caches.append(static[i])
                continue
            c = build_rtuple_cache(tab, params.mu, prec, table=i + 1)
            if hook is not None:
                hook(c)
            n_i, d_i = tab.shape
            counter.add("estep", subs=K * n_i * d_i,
                        mults=K * n_i * (d_i * d_s + d_i * d_i + d_i))
            if i >= 1:
                static[i] = c
            caches.append(c)
        for c in caches:
            c.check(prec)
        pairs = {}
        for a in range(q):
            for b in range(a + 1, q):
                if a >= 1 and (a, b) in static_pairs:
                    pairs[(a, b)] = static_pairs[(a, b)]
                    continue
                entry = [_pair_tables(caches, a, b, k, prec) for k in range(K)]
                narrow = entry[0][0]
                other = b if narrow == a else a
                n_o, d_o = block.tables[other].shape
                counter.add("estep", mults=K * n_o * d_o * block.tables[narrow].shape[1])
                pairs[(a, b)] = (narrow, other, [e[1] for e in entry])
                if a >= 1:
                    static_pairs[(a, b)] = pairs[(a, b)]
        mu_s = np.ascontiguousarray(params.mu[:, :d_s])
        iss = np.ascontiguousarray(prec.precision[:, :d_s, :d_s])
        crosses = tuple(np.ascontiguousarray(c.cross) for c in caches)
        lrs = tuple(np.ascontiguousarray(c.lr) for c in caches)
        for ch in block.chunks:
            n = len(ch)
            g = np.ascontiguousarray(ch.groups, dtype=np.int64)
            pair_width = 0
            quad = np.empty((n, K))
            KR.factorized_quad(np.ascontiguousarray(ch.xs, dtype=np.float64), mu_s, iss, crosses,
                               lrs, g, quad)
            for (narrow, other, vs) in pairs.values():
                for k in range(K):
                    quad[:, k] += 2.0 * _rowdot(caches[narrow].pd[k][g[:, narrow]],
                                                vs[k][g[:, other]])
            log_r[ch.ordinals] = base - 0.5 * quad
            for (narrow, _, _) in pairs.values():
                pair_width += block.tables[narrow].shape[1]
            counter.add("estep", subs=K * n * d_s,
                        mults=K * n * (d_s * d_s + 2 * d_s + pair_width))


# ---------------------------------------------------------------------------
# M-step


def mean_pass(source, resp, counter):
    """Sum_n gamma_nk x_n for every component, shape (K, d)."""
    K = resp.gamma.shape[1]
    widths = source.widths
    d = int(sum(widths))
    out = np.zeros((K, d))
    with counter.timed("mu"):
        if source.kind != "F":
            for ch in source.passes(counter, "mu"):
                out += resp.gamma[ch.ordinals].T @ ch.x
                counter.add("mu", mults=K * len(ch) * d)
            return out
        offs = offsets_of(source)
        static_gs = {}
        static_tabs = {}
        for block in source.passes(counter, "mu"):
            gs0 = np.zeros((len(block.tables[0]), K))
            for ch in block.chunks:
                gam = resp.gamma[ch.ordinals]
                out[:, :widths[0]] += gam.T @ ch.xs
                counter.add("mu", mults=K * len(ch) * widths[0])
                gs0 += _group_sum(ch.groups[:, 0], gam, len(gs0))
                for i in range(1, len(block.tables)):
                    if i not in static_gs:
                        static_gs[i] = np.zeros((len(block.tables[i]), K))
                        static_tabs[i] = block.tables[i]
                    static_gs[i] += _group_sum(ch.groups[:, i], gam, len(static_gs[i]))
            tab = block.tables[0]
            out[:, offs[1]:offs[2]] += gs0.T @ tab
            counter.add("mu", mults=K * tab.shape[0] * tab.shape[1])
        for i, gs in static_gs.items():
            tab = static_tabs[i]
            out[:, offs[i + 1]:offs[i + 2]] += gs.T @ tab
            counter.add("mu", mults=K * tab.shape[0] * tab.shape[1])
    return out


def sigma_pass(source, resp, mu, counter, mode="grouped"):
    """Sum_n gamma_nk (x_n - mu_k)(x_n - mu_k)^T, shape (K, d, d)."""
    K, d = mu.shape
    acc = np.zeros((K, d, d))
    with counter.timed("sigma"):
        if source.kind != "F":
            for ch in source.passes(counter, "sigma"):
                gam = resp.gamma[ch.ordinals]
                for k in range(K):
                    pd = ch.x - mu[k]
                    acc[k] += (gam[:, k:k + 1] * pd).T @ pd
                n = len(ch)
                counter.add("sigma", subs=K * n * d, weights=K * n * d, mults=K * n * d * d)
        else:
            _sigma_factorized(source, resp, mu, counter, mode, acc)
    return acc


def _sigma_factorized(source, resp, mu, counter, mode, acc):
    K = mu.shape[0]
    offs = offsets_of(source)
    d_s = source.widths[0]
    sl = [slice(offs[i], offs[i + 1]) for i in range(len(offs) - 1)]
    static = {}   # i -> dict(pd, gs, ws)

    def table_state(tab, i):
        pd = tab[None, :, :] - mu[:, None, sl[i + 1]]
        counter.add("sigma", subs=K * tab.size)
        return {"tab": tab, "pd": pd, "gs": np.zeros((K, len(tab))),
                "ws": np.zeros((K, len(tab), d_s)) if mode == "grouped" else None}

    def finish(st, i):
        """Fold the per-tuple sums of table i into the LR (and grouped UR) blocks."""
        n_i, d_i = st["tab"].shape
        for k in range(K):
            pd = st["pd"][k]
            acc[k, sl[i + 1], sl[i + 1]] += (st["gs"][k][:, None] * pd).T @ pd
            if mode == "grouped":
                ur = st["ws"][k].T @ pd
                acc[k, sl[0], sl[i + 1]] += ur
                acc[k, sl[i + 1], sl[0]] += ur.T
        counter.add("sigma", weights=K * n_i * d_i, mults=K * n_i * d_i * d_i)
        if mode == "grouped":
            counter.add("sigma", mults=K * n_i * d_i * d_s)

    for block in source.passes(counter, "sigma"):
        states = [table_state(block.tables[0], 0)]
        for i in range(1, len(block.tables)):
            if i not in static:
                static[i] = table_state(block.tables[i], i)
            states.append(static[i])
        q = len(states)
        for ch in block.chunks:
            gam = resp.gamma[ch.ordinals]
            g = ch.groups
            n = len(ch)
            if mode == "grouped":
                KR.scatter_groups(np.ascontiguousarray(ch.xs, dtype=np.float64),
                                  np.ascontiguousarray(gam), np.ascontiguousarray(mu[:, :d_s]),
                                  np.ascontiguousarray(g, dtype=np.int64),
                                  tuple(st["gs"] for st in states),
                                  tuple(st["ws"] for st in states))
            for k in range(K):
                pd_s = ch.xs - mu[k, :d_s]
                w = gam[:, k:k + 1] * pd_s
                acc[k, sl[0], sl[0]] += w.T @ pd_s
                if mode == "paper":
                    for i, st in enumerate(states):
                        st["gs"][k] += np.bincount(g[:, i], weights=gam[:, k],
                                                   minlength=len(st["tab"]))
                        pd_r = st["pd"][k][g[:, i]]
                        acc[k, sl[0], sl[i + 1]] += w.T @ pd_r
                        acc[k, sl[i + 1], sl[0]] += pd_r.T @ w
            counter.add("sigma", subs=K * n * d_s, weights=K * n * d_s, mults=K * n * d_s * d_s)
            if mode == "paper":
                counter.add("sigma", mults=K * n * 2 * d_s * sum(s["tab"].shape[1] for s in states))
            for a in range(q):
                for b in range(a + 1, q):
                    _pair_block(states, a, b, g, gam, acc, sl, mode, counter)
        finish(states[0], 0)
    for i, st in static.items():
        finish(st, i)


def _pair_block(states, a, b, g, gam, acc, sl, mode, counter):
    """R_a-R_b block of every component's scatter for one chunk.

    Grouped mode sums the responsibilities of rows sharing an (r_a, r_b) key
    pair first; paper mode multiplies per row.
    """
    K = gam.shape[1]
    pa_all, pb_all = states[a]["pd"], states[b]["pd"]
    da, db = pa_all.shape[2], pb_all.shape[2]
    if mode == "grouped":
        combo = g[:, a].astype(np.int64) * pb_all.shape[1] + g[:, b]
        uniq, inv = np.unique(combo, return_inverse=True)
        ga, gb = np.divmod(uniq, pb_all.shape[1])
        wsum = _group_sum(inv.ravel(), gam, len(uniq))
        rows = len(uniq)
    else:
        ga, gb, wsum, rows = g[:, a], g[:, b], gam, len(gam)
    for k in range(K):
        pa = wsum[:, k:k + 1] * pa_all[k][ga]
        m_ab = pa.T @ pb_all[k][gb]
        acc[k, sl[a + 1], sl[b + 1]] += m_ab
        acc[k, sl[b + 1], sl[a + 1]] += m_ab.T
    counter.add("sigma", weights=K * rows * da, mults=K * rows * da * db)


def mstep(source, resp, params, counter=None, mode="grouped", reseed=None):
    """New (pi, mu, Sigma): mean pass, then covariance pass with the new means.

    ``reseed(k)`` returns ``(mu_k, sigma_k)`` for a component whose effective
    count fell below ``1e-10 * N``.
    """
    counter = counter if counter is not None else OpCounter()
    N = source.n_rows
    K = params.K
    Nk = resp.Nk
    empty = Nk < EMPTY_FRACTION * N
    safe = np.where(empty, 1.0, Nk)
    mu = mean_pass(source, resp, counter) / safe[:, None]
    acc = sigma_pass(source, resp, mu, counter, mode)
    sigma = acc / safe[:, None, None]
    sigma = 0.5 * (sigma + np.transpose(sigma, (0, 2, 1)))
    pi = Nk / N
    for k in range(K):
        if empty[k]:
            if reseed is None:
                mu[k], sigma[k] = params.mu[k], params.sigma[k]
            else:
                mu[k], sigma[k] = reseed(k)
            pi[k] = 1.0 / K
    pi = pi / pi.sum()
    return GmmParams(pi, mu, sigma)


# ---------------------------------------------------------------------------
# driver


def feature_moments(source, counter=None):
    """Mean and variance of every joined feature, computed with one pass."""
    counter = counter if counter is not None else OpCounter()
    d = int(sum(source.widths))
    s1, s2 = np.zeros(d), np.zeros(d)
    offs = offsets_of(source)
    if source.kind != "F":
        for ch in source.passes(counter, "init"):
            s1 += ch.x.sum(axis=0)
            s2 += (ch.x * ch.x).sum(axis=0)
    else:
        counts = {}
        tabs = {}
        for block in source.passes(counter, "init"):
            c0 = np.zeros(len(block.tables[0]))
            for ch in block.chunks:
                s1[:offs[1]] += ch.xs.sum(axis=0)
                s2[:offs[1]] += (ch.xs * ch.xs).sum(axis=0)
                c0 += np.bincount(ch.groups[:, 0], minlength=len(c0))
                for i in range(1, len(block.tables)):
                    tabs[i] = block.tables[i]
                    counts[i] = counts.get(i, 0) + np.bincount(ch.groups[:, i],
                                                               minlength=len(tabs[i]))
            t = block.tables[0]
            s1[offs[1]:offs[2]] += c0 @ t
            s2[offs[1]:offs[2]] += c0 @ (t * t)
        for i, c in counts.items():
            s1[offs[i + 1]:offs[i + 2]] += c @ tabs[i]
            s2[offs[i + 1]:offs[i + 2]] += c @ (tabs[i] * tabs[i])
    n = source.n_rows
    mean = s1 / n
    var = np.maximum(s2 / n - mean * mean, 0.0)
    return mean, var


def init_params(source, K, seed, counter=None):
    """Uniform pi, K distinct sampled join rows as means, global diagonal Sigma."""
    if source.n_rows < K:
        raise ShapeError(f"need at least K={K} join rows, have {source.n_rows}")
    rng = np.random.default_rng(seed)
    rows = rng.choice(source.n_rows, size=K, replace=False)
    mu = source.fetch(rows)
    _, var = feature_moments(source, counter)
    var = np.where(var > 0, var, 1.0)
    sigma = np.repeat(np.diag(var)[None], K, axis=0)
    return GmmParams(np.full(K, 1.0 / K), mu, sigma), rng, var


def train_gmm(source, config=None, init=None, counter=None):
    """Run EM to convergence; returns ``(params, trace)``.

    Iteration ``t`` records the log-likelihood of the parameters it starts
    from.  Training stops before the M-step once two consecutive
    log-likelihoods differ by less than ``tol``.
    """
    config = config or GmmConfig()
    counter = counter if counter is not None else OpCounter()
    if source.n_rows == 0:
        raise ShapeError("cannot train on an empty join")
    before = counter.snapshot()
    params, rng, global_var = init_params(source, config.K, config.seed, counter)
    if init is not None:
        params = init.copy()
    if params.d != sum(source.widths):
        raise ShapeError(f"parameters have d={params.d}, join has {sum(source.widths)}")
    offsets = offsets_of(source)
    init_snap = counter.snapshot()
    trace = TrainTrace(source.kind, meta={
        "config": config.to_dict(), "n_rows": source.n_rows, "widths": list(source.widths),
        "init": {"counts": delta(init_snap, before), "ms": time_delta_ms(init_snap, before)},
    })

    def reseed(k):
        row = source.fetch(rng.integers(0, source.n_rows, 1))[0]
        return row, np.diag(global_var)

    prev = None
    for it in range(config.max_iters):
        snap = counter.snapshot()
        with counter.timed("precision"):
            prec = precompute_precision(params, offsets)
        resp = estep(source, params, prec, counter, config.cache_hook)
        if prev is not None and abs(resp.loglik - prev) < config.tol:
            trace.converged = True
            trace.meta["final_loglik"] = resp.loglik
            break
        params = mstep(source, resp, params, counter, config.sigma_mode, reseed)
        after = counter.snapshot()
        counts = delta(after, snap)
        trace.iterations.append({
            "iter": it, "loglik": resp.loglik,
            "phase_times_ms": time_delta_ms(after, snap),
            "pages_read": counts["pages_read"], "mults": counts["mults"],
            "subs": counts["subs"], "weights": counts["weights"],
            "field_reads": counts["field_reads"],
        })
        if config.record_params:
            trace.params.append(params.copy())
        prev = resp.loglik
    trace.meta.setdefault("final_loglik", prev)
    trace.meta["n_iters"] = len(trace.iterations)
    return params, trace
