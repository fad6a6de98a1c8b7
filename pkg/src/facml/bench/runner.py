"""One timed, counted training run of one strategy."""

from __future__ import annotations

import time
from dataclasses import asdict, dataclass, field

from ..counters import KINDS, OpCounter
from ..gmm import GmmConfig, train_gmm
from ..nn import NnConfig, train_nn
from ..relstore import make_source, materialize_join

STRATEGIES = ("m", "s", "f")


@dataclass
class RunRecord:
    model: str
    strategy: str
    seconds: float                 # wall time, including materialization for M
    materialize_seconds: float
    counts: dict
    phase_seconds: dict
    workload: dict
    final: float | None            # last log-likelihood (gmm) or loss (nn)
    steps: int
    extra: dict = field(default_factory=dict)

    def to_dict(self):
        return asdict(self)


def _workload(model, source, config):
    cfg = config.to_dict()
    cfg.pop("seed", None)
    return {"model": model, "n_rows": source.n_rows, "widths": list(source.widths),
            "config": cfg, "seed": config.seed}


def run_strategy(model, strategy, catalog, spec, config=None, t_name="T", rematerialize=True):
    """Train ``model`` ("gmm" or "nn") with ``strategy``; returns (params, trace, record).

    For M the join is materialized inside the timed region (after dropping a
    stale T when ``rematerialize``), so its cost is part of the run.
    """
    strategy = strategy.lower()
    if strategy not in STRATEGIES:
        raise ValueError(f"unknown strategy {strategy!r}; expected one of {STRATEGIES}")
    if model not in ("gmm", "nn"):
        raise ValueError(f"unknown model {model!r}")
    config = config or (GmmConfig() if model == "gmm" else NnConfig())
    counter = OpCounter()
    t0 = time.perf_counter()
    mat = 0.0
    if strategy == "m":
        if rematerialize and t_name in catalog:
            catalog.drop(t_name)
        if t_name not in catalog:
            m0 = time.perf_counter()
            with counter.timed("materialize"):
                materialize_join(spec, catalog, t_name, counter)
            mat = time.perf_counter() - m0
    source = make_source(strategy, catalog, spec, t_name)
    if model == "gmm":
        params, trace = train_gmm(source, config, counter=counter)
        final, steps = trace.meta.get("final_loglik"), len(trace.iterations)
    else:
        params, trace = train_nn(source, config, counter=counter)
        final = trace.losses[-1] if trace.epochs else None
        steps = len(trace.epochs)
    seconds = time.perf_counter() - t0
    snap = counter.snapshot()
    record = RunRecord(
        model=model, strategy=strategy.upper(), seconds=seconds, materialize_seconds=mat,
        counts={k: counter.get(k) for k in KINDS}, phase_seconds=snap["seconds"],
        workload=_workload(model, source, config), final=final, steps=steps,
        extra={"counts_by_phase": snap["counts"]},
    )
    return params, trace, record
