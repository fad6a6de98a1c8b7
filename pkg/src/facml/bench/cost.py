"""Analytic I/O cost model of the block-nested-loop strategies and the saving rate.

All arithmetic is generic, so passing ``fractions.Fraction`` inputs gives
exact results.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

from ..errors import SchemaError


@dataclass(frozen=True)
class CostModelInputs:
    S_pages: object
    R_pages: object
    T_pages: object
    block_size: object
    iters: int = 1
    n_S: int = 1
    n_R: int = 1
    d_S: int = 1
    d_R: int = 1
    tau_s: object = 1
    tau_m: object = 1

    def __post_init__(self):
        for name in ("S_pages", "R_pages", "T_pages", "block_size", "iters", "n_S", "n_R",
                     "d_S", "d_R", "tau_s", "tau_m"):
            if not getattr(self, name) > 0:
                raise SchemaError(f"{name} must be positive")

    @property
    def rr(self):
        return self.n_S / self.n_R

    @classmethod
    def from_relations(cls, s, r, block_size, iters, t_pages=None, tau_s=1, tau_m=1):
        """Inputs for a binary join of stored relations ``s`` and ``r``.

        Pages hold a fixed number of rows, so ``t_pages`` defaults to the page
        count of a T written with S's page size.
        """
        d_s, d_r = s.schema.n_features, r.schema.n_features
        if t_pages is None:
            t_pages = -(-s.n_rows // s.page_size_rows)
        return cls(max(s.n_pages, 1), max(r.n_pages, 1), max(t_pages, 1), block_size, iters,
                   s.n_rows, r.n_rows, d_s, d_r, tau_s, tau_m)

    def to_dict(self):
        return {k: (v if isinstance(v, (int, float)) else float(v))
                for k, v in self.__dict__.items()}


def io_cost_model(inp, ceil_blocks=False):
    """Page I/O of materialized (M) and streamed (S) training.

    ``m_cost = |R| + (|R|/B)|S| + |T| + 3 iter |T|`` and
    ``s_cost = 3 iter (|R| + (|R|/B)|S|)``.  With ``ceil_blocks`` the number
    of R blocks is rounded up, which is what a real scan performs.

    ``crossover_block_size`` is the B above which S costs fewer pages, or
    ``None`` when no block size makes S cheaper.
    """
    R, S, T, B, it = inp.R_pages, inp.S_pages, inp.T_pages, inp.block_size, inp.iters
    blocks = math.ceil(R / B) if ceil_blocks else R / B
    join = R + blocks * S
    m_cost = join + T + 3 * it * T
    s_cost = 3 * it * join
    denom = (3 * it + 1) * T - (3 * it - 1) * R
    crossover = (3 * it - 1) * R * S / denom if denom > 0 else None
    return {"m_cost": m_cost, "s_cost": s_cost, "crossover_block_size": crossover,
            "attainable": crossover is not None}


def saving_rate(inp):
    """Fraction of subtract/multiply time the factorized covariance pass saves."""
    rr = inp.n_S / inp.n_R
    d = inp.d_S + inp.d_R
    num = (rr - 1) * (inp.tau_s + inp.d_R * inp.tau_m)
    den = rr * (inp.d_S / inp.d_R + 1) * (inp.tau_s + d * inp.tau_m)
    return num / den


def measured_saving(direct, factorized, tau_s=1, tau_m=1):
    """1 - cost(F)/cost(direct) from ``{"subs", "mults"}`` counter dicts."""
    cost = lambda c: tau_s * c.get("subs", 0) + tau_m * c.get("mults", 0)  # noqa: E731
    return 1 - cost(factorized) / cost(direct)
