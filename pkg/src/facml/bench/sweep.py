"""Parameter sweeps over synthetic datasets.

CSV columns, in order: ``param, value, strategy, rep, seconds, pages,
mults, final_loglik_or_loss, error``.  ``pages`` counts pages read plus
written; ``error`` is empty unless that run failed, in which case the
numeric columns are blank and the sweep continues.
"""

from __future__ import annotations

import csv
import json
import os
import statistics
import tempfile
from dataclasses import dataclass, field

from ..datagen import SynthSpec, gen_binary, gen_multiway
from ..errors import FacmlError, FormatError, SchemaError
from ..gmm import GmmConfig
from ..nn import NnConfig
from ..relstore import Catalog
from .runner import STRATEGIES, run_strategy

PARAMS = ("rr", "d_R", "K", "n_h", "d_R1")
CSV_COLUMNS = ("param", "value", "strategy", "rep", "seconds", "pages", "mults",
               "final_loglik_or_loss", "error")


@dataclass
class SweepSpec:
    param: str
    values: list
    base: dict                         # SynthSpec fields
    model: str = "gmm"
    strategies: list = field(default_factory=lambda: list(STRATEGIES))
    repetitions: int = 3
    train: dict = field(default_factory=dict)   # GmmConfig / NnConfig fields
    page_size_rows: int = 8192
    block_size_pages: int = 16

    def __post_init__(self):
        if self.param not in PARAMS:
            raise SchemaError(f"param must be one of {PARAMS}")
        if not self.values:
            raise SchemaError("sweep grid is empty")
        if self.repetitions < 1:
            raise SchemaError("repetitions must be >= 1")
        if self.model not in ("gmm", "nn"):
            raise SchemaError("model must be gmm or nn")
        self.strategies = [s.lower() for s in self.strategies]
        bad = set(self.strategies) - set(STRATEGIES)
        if bad:
            raise SchemaError(f"unknown strategies {sorted(bad)}")

    @classmethod
    def from_json(cls, path):
        try:
            with open(path) as fh:
                return cls(**json.load(fh))
        except (OSError, ValueError, TypeError) as exc:
            raise FormatError(f"{path}: {exc}") from None

    def point(self, value, index):
        """(SynthSpec, train config) of one grid point; dataset seeds differ per point."""
        base = dict(self.base)
        train = dict(self.train)
        base["seed"] = int(base.get("seed", 0)) + index
        if self.param == "rr":
            base["n_R"] = max(1, int(base["n_S"]) // int(value))
        elif self.param == "d_R":
            base["d_R"] = int(value)
        elif self.param == "d_R1":
            d_r = list(base["d_R"]) if isinstance(base["d_R"], (list, tuple)) else [base["d_R"]]
            d_r[0] = int(value)
            base["d_R"] = d_r
        elif self.param == "K":
            base["K_true"] = int(value)
            train["K"] = int(value)
        elif self.param == "n_h":
            train["hidden"] = [int(value)]
        if self.model == "nn":
            base["with_target"] = True
            return SynthSpec(**base), NnConfig(**train)
        return SynthSpec(**base), GmmConfig(**train)


def run_sweep(spec, out_csv, workdir=None):
    """Run every grid point x strategy x repetition; returns the CSV rows as dicts."""
    rows = []
    own_tmp = workdir is None
    workdir = workdir or tempfile.mkdtemp(prefix="facml-sweep-")
    with open(out_csv, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=CSV_COLUMNS)
        writer.writeheader()
        for i, value in enumerate(spec.values):
            try:
                synth, config = spec.point(value, i)
                catalog = Catalog(os.path.join(workdir, f"point{i}"))
                gen = gen_binary if synth.q == 1 else gen_multiway
                gen(synth, catalog, page_size_rows=spec.page_size_rows,
                    block_size_pages=spec.block_size_pages)
                join = catalog.join()
                point_error = None
            except (FacmlError, ValueError, TypeError) as exc:
                point_error = f"{type(exc).__name__}: {exc}"
            for strategy in spec.strategies:
                for rep in range(spec.repetitions):
                    row = {"param": spec.param, "value": value, "strategy": strategy.upper(),
                           "rep": rep, "error": point_error or ""}
                    if point_error is None:
                        try:
                            _, _, rec = run_strategy(spec.model, strategy, catalog, join, config)
                            row.update(seconds=f"{rec.seconds:.6f}",
                                       pages=rec.counts["pages_read"] + rec.counts["pages_written"],
                                       mults=rec.counts["mults"],
                                       final_loglik_or_loss=repr(rec.final))
                        except (FacmlError, ValueError, ArithmeticError) as exc:
                            row["error"] = f"{type(exc).__name__}: {exc}"
                    writer.writerow(row)
                    fh.flush()
                    rows.append(row)
    if own_tmp:
        import shutil

        shutil.rmtree(workdir, ignore_errors=True)
    return rows


def summarize(rows):
    """Median and cold-start (rep 0) seconds per (value, strategy)."""
    groups = {}
    for r in rows:
        if r.get("error"):
            continue
        groups.setdefault((str(r["value"]), r["strategy"]), []).append(r)
    out = {}
    for key, rs in groups.items():
        secs = [float(r["seconds"]) for r in rs]
        cold = [float(r["seconds"]) for r in rs if int(r["rep"]) == 0]
        out[key] = {"median_seconds": statistics.median(secs),
                    "cold_seconds": cold[0] if cold else None, "runs": len(rs)}
    return out


def read_csv(path):
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))
