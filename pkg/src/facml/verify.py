"""Cross-strategy equivalence checks.

M, S and F are trained from one seed and their per-iteration (GMM) or
per-epoch (NN) states are compared against M.  The relative difference of
two arrays is ``max|a - b| / max|b|``.
"""

from __future__ import annotations

import dataclasses
import json

import numpy as np

from .gmm import GmmConfig, train_gmm
from .nn import NnConfig, train_nn
from .nn.mlp import MlpParams
from .nn.train import _full_pass
from .relstore import make_source

STRATEGIES = ("m", "s", "f")


def rel_diff(a, b):
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        return float("inf")
    scale = float(np.max(np.abs(b))) if b.size else 0.0
    err = float(np.max(np.abs(a - b))) if a.size else 0.0
    return err / scale if scale > 0 else err


class FaultInjector:
    """Cache hook that perturbs one cached value by ``amount``, once."""

    def __init__(self, amount=1e-3):
        self.amount = amount
        self.fired = False

    def __call__(self, cache):
        if self.fired:
            return
        arr = cache.t2 if hasattr(cache, "t2") else cache.lr
        arr[(0,) * arr.ndim] += self.amount
        self.fired = True


def _gmm_state(params, loglik):
    return [params.pi, params.mu, params.sigma, [loglik]]


def verify_gmm(catalog, spec, config=None, tol=1e-8, fault=None, t_name="T"):
    """Train M/S/F and compare (pi, mu, Sigma, loglik) after every iteration.

    ``fault`` is an optional cache hook installed on the F run only.
    """
    config = config or GmmConfig(max_iters=20)
    runs = {}
    for s in STRATEGIES:
        cfg = dataclasses.replace(config, record_params=True,
                                  cache_hook=fault if s == "f" else None)
        _, trace = train_gmm(make_source(s, catalog, spec, t_name), cfg)
        runs[s] = trace
    ref = runs["m"]
    per_iter = []
    n = min(len(t.iterations) for t in runs.values())
    for i in range(n):
        worst = 0.0
        for s in ("s", "f"):
            # parameters after iteration i and the loglik that iteration saw
            a = _gmm_state(runs[s].params[i], runs[s].iterations[i]["loglik"])
            b = _gmm_state(ref.params[i], ref.iterations[i]["loglik"])
            worst = max(worst, *(rel_diff(x, y) for x, y in zip(a, b)))
        per_iter.append(worst)
    same_len = len({len(t.iterations) for t in runs.values()}) == 1
    final = [runs[s].meta["final_loglik"] for s in STRATEGIES]
    final_diff = max(rel_diff([f], [final[0]]) for f in final)
    ok = same_len and all(d <= tol for d in per_iter) and final_diff <= tol
    return {
        "model": "gmm", "tolerance": tol, "max_rel_diff_per_iter": per_iter,
        "max_rel_diff": max(per_iter + [final_diff]), "n_iters": {s: len(runs[s].iterations) for s in STRATEGIES},
        "final_loglik": dict(zip(STRATEGIES, final)), "pass": bool(ok),
    }


def nn_gradients(source, params, chunk_rows=1024):
    """Full-batch gradient of the 1/(2N) loss at ``params``."""
    from .counters import OpCounter

    return _full_pass(source, params, OpCounter(), None, chunk_rows).gradients()


def verify_nn(catalog, spec, config=None, tol=1e-8, grad_tol=1e-10, fault=None, t_name="T"):
    """Train M/S/F and compare losses and parameters after every epoch.

    Gradients at the shared initialization are compared as well, at
    ``grad_tol``.
    """
    config = config or NnConfig(epochs=10)
    sources = {s: make_source(s, catalog, spec, t_name) for s in STRATEGIES}
    d = int(sum(sources["m"].widths))
    init = MlpParams.init([d, *config.hidden, 1], config.activation, config.seed)
    grads = {s: nn_gradients(src, init, config.chunk_rows).flat() for s, src in sources.items()}
    grad_diff = max(rel_diff(grads[s], grads["m"]) for s in ("s", "f"))
    runs = {}
    for s in STRATEGIES:
        cfg = dataclasses.replace(config, record_params=True,
                                  cache_hook=fault if s == "f" else None)
        _, trace = train_nn(sources[s], cfg, init=init)
        runs[s] = trace
    ref = runs["m"]
    per_epoch = []
    for e in range(len(ref.epochs)):
        worst = 0.0
        for s in ("s", "f"):
            worst = max(worst, rel_diff([runs[s].losses[e]], [ref.losses[e]]),
                        *(rel_diff(a, b) for a, b in zip(runs[s].params[e].W, ref.params[e].W)),
                        *(rel_diff(a, b) for a, b in zip(runs[s].params[e].b, ref.params[e].b)))
        per_epoch.append(worst)
    ok = all(v <= tol for v in per_epoch) and grad_diff <= grad_tol
    return {
        "model": "nn", "tolerance": tol, "grad_tolerance": grad_tol,
        "max_rel_diff_per_iter": per_epoch, "max_rel_diff": max(per_epoch, default=0.0),
        "gradient_rel_diff": grad_diff, "losses": {s: runs[s].losses for s in STRATEGIES},
        "pass": bool(ok),
    }


def write_report(report, path):
    with open(path, "w") as fh:
        json.dump(report, fh, indent=2)
