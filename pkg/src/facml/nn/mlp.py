"""MLP parameters, per-R-tuple first-layer caches and reference propagation.

The first layer is where strategies differ.  For a join row
``x = [x_S | x_R1 | ... | x_Rq]`` the pre-activation splits as

    a = W_S x_S + sum_m (W_Rm x_Rm) + b

and each ``W_Rm x_Rm`` (with ``b`` folded into the first table's term) is a
per-R-tuple quantity ``t2`` shared by every S row referencing that tuple.
Layers above the first are computed directly under every strategy.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass

import numpy as np

from ..errors import ShapeError, StaleCache
from .activations import ACTIVATIONS, activation_apply, derivative_from_value

_versions = itertools.count(1)


class MlpParams:
    """Weights ``W[l]`` of shape (out, in), biases ``b[l]``, hidden activation.

    ``version`` changes on every update so first-layer caches can detect
    that they are stale.
    """

    def __init__(self, W, b, activation="relu"):
        if activation not in ACTIVATIONS:
            raise ValueError(f"unknown activation {activation!r}")
        self.W = [np.asarray(w, dtype=np.float64) for w in W]
        self.b = [np.asarray(v, dtype=np.float64) for v in b]
        self.activation = activation
        if len(self.W) != len(self.b) or not self.W:
            raise ShapeError("need one bias per weight matrix and at least one layer")
        for l, (w, v) in enumerate(zip(self.W, self.b)):
            if w.ndim != 2 or v.shape != (w.shape[0],):
                raise ShapeError(f"layer {l}: W{w.shape} and b{v.shape} do not match")
            if l and w.shape[1] != self.W[l - 1].shape[0]:
                raise ShapeError(f"layer {l} input {w.shape[1]} != previous output "
                                 f"{self.W[l - 1].shape[0]}")
        self.version = next(_versions)

    @classmethod
    def init(cls, layer_sizes, activation="relu", seed=0):
        """Seeded uniform(+-sqrt(6 / (fan_in + fan_out))) weights, zero biases."""
        if len(layer_sizes) < 2 or min(layer_sizes) < 1:
            raise ShapeError(f"bad layer sizes {layer_sizes}")
        rng = np.random.default_rng(seed)
        W, b = [], []
        for fan_in, fan_out in zip(layer_sizes[:-1], layer_sizes[1:]):
            lim = np.sqrt(6.0 / (fan_in + fan_out))
            W.append(rng.uniform(-lim, lim, size=(fan_out, fan_in)))
            b.append(np.zeros(fan_out))
        return cls(W, b, activation)

    @property
    def layer_sizes(self):
        return [self.W[0].shape[1]] + [w.shape[0] for w in self.W]

    @property
    def n_layers(self):
        return len(self.W)

    def first_layer_split(self, widths):
        """Column blocks [W_S, W_R1, ...] of the first weight matrix."""
        offs = np.concatenate([[0], np.cumsum(widths)])
        if offs[-1] != self.W[0].shape[1]:
            raise ShapeError(f"widths {list(widths)} do not sum to input size "
                             f"{self.W[0].shape[1]}")
        return [self.W[0][:, offs[i]:offs[i + 1]] for i in range(len(widths))]

    def bump(self):
        self.version = next(_versions)

    def copy(self):
        return MlpParams([w.copy() for w in self.W], [v.copy() for v in self.b], self.activation)

    def apply_gradient(self, grads, lr):
        for l in range(self.n_layers):
            self.W[l] -= lr * grads.dW[l]
            self.b[l] -= lr * grads.db[l]
        self.bump()

    def to_dict(self):
        return {"activation": self.activation, "W": [w.tolist() for w in self.W],
                "b": [v.tolist() for v in self.b]}

    @classmethod
    def from_dict(cls, d):
        return cls([np.array(w) for w in d["W"]], [np.array(v) for v in d["b"]], d["activation"])


@dataclass
class GradientSet:
    dW: list
    db: list

    def first_layer_blocks(self, widths):
        """[PG_S, PG_R1, ...] column blocks of the first-layer gradient."""
        offs = np.concatenate([[0], np.cumsum(widths)])
        return [self.dW[0][:, offs[i]:offs[i + 1]] for i in range(len(widths))]

    def flat(self):
        return np.concatenate([a.ravel() for pair in zip(self.dW, self.db) for a in pair])


@dataclass
class RTupleCacheNN:
    """t2 = W_R x_R (+ b for the table that carries the bias), one row per tuple."""

    table: int
    t2: np.ndarray      # (n_tuples, n_h)
    version: int

    def check(self, params):
        if self.version != params.version:
            raise StaleCache(f"t2 cache built for parameters v{self.version}, "
                             f"current is v{params.version}")


def build_rtuple_cache_nn(x_r, params, widths, table=1):
    """Cache for attribute table ``table`` (1-based); the bias goes to table 1."""
    w_r = params.first_layer_split(widths)[table]
    x_r = np.atleast_2d(np.asarray(x_r, dtype=np.float64))
    if x_r.shape[1] != w_r.shape[1]:
        raise ShapeError(f"R width {x_r.shape[1]} != W_R width {w_r.shape[1]}")
    t2 = x_r @ w_r.T
    if table == 1:
        t2 = t2 + params.b[0]
    return RTupleCacheNN(table, t2, params.version)


# ---------------------------------------------------------------------------
# reference propagation (numpy)


@dataclass
class Activations:
    a: list     # pre-activations per layer
    h: list     # inputs to layers 2..L (hidden outputs)


def forward_first_layer(x, params):
    """a = W x + b for fully joined rows; returns ``(a, h)``."""
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    if x.shape[1] != params.W[0].shape[1]:
        raise ShapeError(f"input width {x.shape[1]} != {params.W[0].shape[1]}")
    a = x @ params.W[0].T + params.b[0]
    return a, activation_apply(params.activation, a)[0]


def forward_first_layer_factorized(x_s, caches, groups, params, widths):
    """a = W_S x_S + sum_m t2_m[g_m] from per-table caches; returns ``(a, h)``."""
    x_s = np.atleast_2d(np.asarray(x_s, dtype=np.float64))
    groups = np.asarray(groups).reshape(len(x_s), -1)
    if groups.shape[1] != len(caches) or len(caches) != len(widths) - 1:
        raise ShapeError("need one cache and one group column per attribute table")
    if sum(c.table == 1 for c in caches) != 1:
        raise ShapeError("exactly one cache must carry the bias")
    for c in caches:
        c.check(params)
    a = x_s @ params.first_layer_split(widths)[0].T
    for m, c in enumerate(caches):
        a += c.t2[groups[:, m]]
    return a, activation_apply(params.activation, a)[0]


def forward_first_layer_multiway(x_s, caches, groups, params, widths):
    if len(caches) < 2:
        raise ShapeError("multi-way forward needs q >= 2 attribute tables")
    return forward_first_layer_factorized(x_s, caches, groups, params, widths)


def forward_full(params, a1):
    """Propagate first-layer pre-activations to the output; identity output unit."""
    a1 = np.atleast_2d(a1)
    if a1.shape[1] != params.W[0].shape[0]:
        raise ShapeError(f"pre-activation width {a1.shape[1]} != {params.W[0].shape[0]}")
    acts = Activations([a1], [])
    z = a1
    for l in range(1, params.n_layers):
        h = activation_apply(params.activation, z)[0]
        acts.h.append(h)
        z = h @ params.W[l].T + params.b[l]
        acts.a.append(z)
    return (z[:, 0] if z.shape[1] == 1 else z), acts


def mse_loss(o, y):
    """E = 1/(2N) sum (o - y)^2."""
    o = np.asarray(o, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if o.shape != y.shape:
        raise ShapeError(f"outputs {o.shape} and targets {y.shape} differ")
    if o.size == 0:
        return 0.0
    r = o - y
    return float(r @ r) / (2.0 * len(r))


def backward_upper(params, acts, o, y, n_total=None):
    """Gradients of layers 2..L and dE/da of the first layer.

    ``n_total`` is the N of the 1/(2N) loss when ``y`` is only part of it.
    """
    n = len(y)
    o2 = np.asarray(o, dtype=np.float64).reshape(n, -1)
    delta = (o2 - np.asarray(y, dtype=np.float64).reshape(n, -1)) / (n_total or n)
    L = params.n_layers
    dW = [None] * L
    db = [None] * L
    for l in range(L - 1, 0, -1):
        h = acts.h[l - 1]
        dW[l] = delta.T @ h
        db[l] = delta.sum(axis=0)
        delta = (delta @ params.W[l]) * derivative_from_value(params.activation, acts.a[l - 1], h)
    return delta, dW, db


def backward(params, acts, o, y, x_parts, groups=None):
    """Full chain-rule gradients; first layer assembled as [PG_S | PG_R1 | ...].

    ``x_parts`` is ``[x]`` for joined rows, or ``[x_S, x_R1, ...]`` with R
    blocks indexed per row by ``groups[:, m]``.
    """
    delta, dW, db = backward_upper(params, acts, o, y)
    blocks = [delta.T @ np.atleast_2d(x_parts[0])]
    for m, x_r in enumerate(x_parts[1:]):
        if groups is None:
            raise ShapeError("factorized backward needs group indexes")
        blocks.append(delta.T @ np.asarray(x_r)[np.asarray(groups).reshape(len(delta), -1)[:, m]])
    dW[0] = np.hstack(blocks)
    if dW[0].shape != params.W[0].shape:
        raise ShapeError(f"first-layer gradient {dW[0].shape} != {params.W[0].shape}")
    db[0] = delta.sum(axis=0)
    return GradientSet(dW, db)
