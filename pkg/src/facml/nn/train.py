"""Gradient-descent training of an MLP regressor over a star join.

Full-batch epochs make one pass over the join.  Mini-batch and SGD epochs
visit a seeded permutation of the distinct R_1 keys, taking the S rows of
``batch_groups`` keys (one key for SGD) per step; the materialized strategy
uses T's FK index so all strategies see the same rows in the same order.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from ..counters import OpCounter, delta as count_delta, time_delta_ms
from ..errors import ShapeError
from . import _kernels as K
from .mlp import GradientSet, MlpParams, build_rtuple_cache_nn, forward_full, backward_upper

BATCH_MODES = ("batch", "minibatch", "sgd")


@dataclass
class NnConfig:
    epochs: int = 10
    hidden: tuple = (50,)
    lr: float = 1e-3
    batch_mode: str = "batch"
    seed: int = 0
    activation: str = "relu"
    batch_groups: int = 16
    chunk_rows: int = 1024
    record_params: bool = False
    cache_hook: object = None   # called on every freshly built t2 cache

    def __post_init__(self):
        self.hidden = tuple(int(h) for h in np.atleast_1d(self.hidden))
        if self.batch_mode not in BATCH_MODES:
            raise ShapeError(f"batch_mode must be one of {BATCH_MODES}")
        if self.epochs < 0 or self.batch_groups < 1 or self.chunk_rows < 1:
            raise ShapeError("epochs >= 0, batch_groups >= 1 and chunk_rows >= 1 required")

    def to_dict(self):
        return {"epochs": self.epochs, "hidden": list(self.hidden), "lr": self.lr,
                "batch_mode": self.batch_mode, "seed": self.seed,
                "activation": self.activation, "batch_groups": self.batch_groups}


@dataclass
class NnTrace:
    strategy: str
    epochs: list = field(default_factory=list)
    meta: dict = field(default_factory=dict)
    params: list = field(default_factory=list)   # snapshots, not serialized

    @property
    def losses(self):
        return [e["loss"] for e in self.epochs]

    def to_dict(self):
        return {"strategy": self.strategy, "meta": self.meta, "epochs": self.epochs}

    def write_json(self, path):
        with open(path, "w") as fh:
            json.dump(self.to_dict(), fh, indent=2)


class _Step:
    """Accumulates one gradient over any number of row chunks."""

    def __init__(self, params, widths, n_total, counter, hook=None, chunk_rows=1024):
        self.p = params
        self.chunk = chunk_rows
        self.widths = list(widths)
        self.offs = np.concatenate([[0], np.cumsum(widths)]).astype(int)
        self.n_total = n_total
        self.c = counter
        self.hook = hook
        self.nh = params.W[0].shape[0]
        self.wt = K.as_f64c(params.W[0].T)
        self.b0 = K.as_f64c(params.b[0])
        self.gt = np.zeros((self.offs[-1], self.nh))
        self.db0 = np.zeros(self.nh)
        self.dW = [None] + [np.zeros_like(w) for w in params.W[1:]]
        self.db = [None] + [np.zeros_like(v) for v in params.b[1:]]
        self.sse = 0.0
        self.rows = 0

    def _upper(self, a1, y):
        p, c = self.p, self.c
        n = len(y)
        if p.n_layers == 2 and p.W[1].shape[0] == 1 and p.activation == "relu":
            return self._upper_single(a1, y)
        with c.timed("upper"):
            o, acts = forward_full(p, a1)
            c.add("upper", mults=n * sum(w.size for w in p.W[1:]))
            r = o - y
            self.sse += float(r @ r)
            self.rows += n
        with c.timed("backward"):
            delta, dW, db = backward_upper(p, acts, o, y, self.n_total)
            for l in range(1, p.n_layers):
                self.dW[l] += dW[l]
                self.db[l] += db[l]
            # dW for each upper layer, plus propagation through W and f'
            c.add("backward", mults=n * sum(2 * w.size + w.shape[1] for w in p.W[1:]))
            self.db0 += delta.sum(axis=0)
        return K.as_f64c(delta)

    def _upper_single(self, a1, y):
        # one ReLU hidden layer and a scalar output: fused forward and
        # backward, timed as "upper"
        p, c = self.p, self.c
        n = len(y)
        delta = np.empty_like(a1)
        with c.timed("upper"):
            sse, db2 = K.upper_relu(a1, K.as_f64c(p.W[1][0]), float(p.b[1][0]),
                                    K.as_f64c(y), float(self.n_total), delta, self.dW[1][0],
                                    self.db0)
            self.db[1][0] += db2
            self.sse += sse
            self.rows += n
        c.add("upper", mults=n * p.W[1].size)
        c.add("backward", mults=n * (2 * p.W[1].size + p.W[1].shape[1]))
        return delta

    def direct(self, x, y):
        ch = self.chunk
        for s in range(0, len(y), ch):
            xc = K.as_f64c(x[s:s + ch])
            yc = y[s:s + ch]
            n = len(yc)
            a1 = np.empty((n, self.nh))
            with self.c.timed("layer1"):
                np.dot(xc, self.wt, out=a1)
                a1 += self.b0
                self.c.add("layer1", mults=n * self.nh * xc.shape[1])
            delta = self._upper(a1, yc)
            with self.c.timed("backward"):
                self.gt += xc.T @ delta
                self.c.add("backward", mults=n * self.nh * xc.shape[1])

    def caches(self, tables, static=None, select=None):
        """t2 caches for every attribute table.

        ``static`` memoizes tables 2..q for a whole pass.  With ``select``
        (the group matrix of one step) only referenced rows of tables 2..q are
        computed and the returned groups are remapped accordingly.
        """
        out, groups = [], None if select is None else select.copy()
        for i, tab in enumerate(tables):
            if i >= 1 and static is not None and i in static:
                out.append(static[i])
                continue
            rows = tab
            if i >= 1 and select is not None:
                uniq, inv = np.unique(select[:, i], return_inverse=True)
                rows = tab[uniq]
                groups[:, i] = inv
            with self.c.timed("layer1"):
                cache = build_rtuple_cache_nn(rows, self.p, self.widths, table=i + 1)
                self.c.add("layer1", mults=rows.shape[0] * self.nh * rows.shape[1])
            if self.hook is not None:
                self.hook(cache)
            cache.t2 = K.as_f64c(cache.t2)
            if i >= 1 and static is not None:
                static[i] = cache
            out.append(cache)
        return out, groups

    def factorized(self, tables, caches, x_s, groups, y):
        for cache in caches:
            cache.check(self.p)
        d_s = self.widths[0]
        wt_s = K.as_f64c(self.wt[:d_s])
        ch = self.chunk
        for s in range(0, len(y), ch):
            xs = K.as_f64c(x_s[s:s + ch])
            g = np.ascontiguousarray(groups[s:s + ch])
            yc = y[s:s + ch]
            n = len(yc)
            a1 = np.empty((n, self.nh))
            with self.c.timed("layer1"):
                K.first_layer_factorized(xs, caches[0].t2, g[:, 0].copy(), wt_s, a1)
                for i in range(1, len(caches)):
                    K.add_gathered(caches[i].t2, g[:, i].copy(), a1)
                self.c.add("layer1", mults=n * self.nh * d_s)
            delta = self._upper(a1, yc)
            with self.c.timed("backward"):
                self.gt[:d_s] += xs.T @ delta
                for i, tab in enumerate(tables):
                    lo, hi = self.offs[i + 1], self.offs[i + 2]
                    # per-row R features probed through the FK, as in the join
                    self.gt[lo:hi] += np.take(tab, g[:, i], axis=0).T @ delta
                self.c.add("backward", mults=n * self.nh * self.offs[-1])

    def gradients(self):
        dW = list(self.dW)
        db = list(self.db)
        dW[0] = self.gt.T.copy()
        db[0] = self.db0
        return GradientSet(dW, db)


def _factorized_tables(block, select):
    """R tables as used by the step (tables 2..q restricted to referenced rows)."""
    if select is None:
        return block.tables
    out = [block.tables[0]]
    for i in range(1, len(block.tables)):
        out.append(block.tables[i][np.unique(select[:, i])])
    return out


def _full_pass(source, params, counter, hook, chunk_rows):
    step = _Step(params, source.widths, source.n_rows, counter, hook, chunk_rows)
    if source.kind == "F":
        static = {}
        for block in source.passes(counter, "epoch"):
            caches, _ = step.caches(block.tables, static)
            for ch in block.chunks:
                step.factorized(block.tables, caches, ch.xs, ch.groups, ch.y)
    else:
        for ch in source.passes(counter, "epoch"):
            step.direct(ch.x, ch.y)
    return step


def _group_step(source, params, keys, counter, hook, chunk_rows):
    if source.kind == "F":
        block = source.group_block(keys, counter, "epoch")
        ch = next(block.chunks)
        step = _Step(params, source.widths, len(ch), counter, hook, chunk_rows)
        if len(ch):
            caches, groups = step.caches(block.tables, None, ch.groups)
            step.factorized(_factorized_tables(block, ch.groups), caches, ch.xs, groups, ch.y)
    else:
        ch = source.group_chunk(keys, counter, "epoch")
        step = _Step(params, source.widths, len(ch), counter, hook, chunk_rows)
        if len(ch):
            step.direct(ch.x, ch.y)
    return step


def train_nn(source, config=None, init=None, counter=None):
    """Train a regression MLP; returns ``(params, trace)``.

    The loss recorded for an epoch is 1/(2N) times the sum of squared errors
    of every row at the moment it was visited; for full-batch epochs that is
    the loss of the parameters the epoch started from.
    """
    config = config or NnConfig()
    counter = counter if counter is not None else OpCounter()
    if not source.has_target:
        raise ShapeError("training an NN needs a target column in S")
    if source.n_rows == 0:
        raise ShapeError("cannot train on an empty join")
    d = int(sum(source.widths))
    if init is not None:
        params = init.copy()
        if params.layer_sizes[0] != d:
            raise ShapeError(f"network input {params.layer_sizes[0]} != join width {d}")
    else:
        params = MlpParams.init([d, *config.hidden, 1], config.activation, config.seed)
    rng = np.random.default_rng(config.seed)
    trace = NnTrace(source.kind, meta={"config": config.to_dict(), "n_rows": source.n_rows,
                                       "widths": list(source.widths)})
    for epoch in range(config.epochs):
        snap = counter.snapshot()
        sse, rows, steps = 0.0, 0, 0
        with counter.timed("epoch_total"):
            if config.batch_mode == "batch":
                step = _full_pass(source, params, counter, config.cache_hook, config.chunk_rows)
                with counter.timed("update"):
                    params.apply_gradient(step.gradients(), config.lr)
                sse, rows, steps = step.sse, step.rows, 1
            else:
                keys = source.fk_values()
                order = keys[rng.permutation(len(keys))]
                size = 1 if config.batch_mode == "sgd" else config.batch_groups
                if hasattr(source, "begin_epoch"):
                    source.begin_epoch(counter, "epoch")
                for s in range(0, len(order), size):
                    step = _group_step(source, params, order[s:s + size], counter,
                                       config.cache_hook, config.chunk_rows)
                    if step.rows:
                        with counter.timed("update"):
                            params.apply_gradient(step.gradients(), config.lr)
                    sse += step.sse
                    rows += step.rows
                    steps += 1
        after = counter.snapshot()
        counts = count_delta(after, snap)
        times = time_delta_ms(after, snap)
        trace.epochs.append({
            "epoch": epoch, "loss": sse / (2.0 * rows) if rows else 0.0, "steps": steps,
            "phase_times_ms": times, "field_reads": counts["field_reads"],
            "pages_read": counts["pages_read"], "mults": counts["mults"],
            "layer1_mults": after["counts"].get("layer1", {}).get("mults", 0)
            - snap["counts"].get("layer1", {}).get("mults", 0),
        })
        if config.record_params:
            trace.params.append(params.copy())
    return params, trace
