"""Deterministic operation / I/O counters and phase timers.

Counters are exact: every kernel call and every page read reports what it
did, keyed by phase (``"estep"``, ``"sigma"``, ``"forward"``, ...).  Timings
are advisory and live next to the counts so traces can carry both.
"""

from __future__ import annotations

import time
from collections import defaultdict
from contextlib import contextmanager

KINDS = ("pages_read", "pages_written", "field_reads", "mults", "subs", "weights")


class OpCounter:
    """Accumulates integer counts per (phase, kind) plus wall time per phase."""

    def __init__(self):
        self._counts = defaultdict(lambda: defaultdict(int))
        self._times = defaultdict(float)

    def add(self, phase, **kinds):
        bucket = self._counts[phase]
        for kind, value in kinds.items():
            if kind not in KINDS:
                raise KeyError(f"unknown counter kind {kind!r}")
            bucket[kind] += int(value)

    def get(self, kind, phase=None):
        if phase is not None:
            return self._counts[phase][kind] if phase in self._counts else 0
        return sum(b[kind] for b in self._counts.values())

    def phases(self):
        return sorted(self._counts)

    @contextmanager
    def timed(self, phase):
        t0 = time.perf_counter()
        try:
            yield
        finally:
            self._times[phase] += time.perf_counter() - t0

    def seconds(self, phase=None):
        if phase is not None:
            return self._times.get(phase, 0.0)
        return sum(self._times.values())

    def snapshot(self):
        """Plain-dict copy: ``{"counts": {phase: {kind: n}}, "seconds": {phase: s}}``."""
        return {
            "counts": {p: dict(b) for p, b in self._counts.items()},
            "seconds": dict(self._times),
        }

    def reset(self):
        self._counts.clear()
        self._times.clear()

    def __repr__(self):
        totals = {k: self.get(k) for k in KINDS if self.get(k)}
        return f"OpCounter({totals})"


def delta(after, before):
    """Difference of two :meth:`OpCounter.snapshot` dicts, flattened by kind."""
    out = {k: 0 for k in KINDS}
    for phase, bucket in after["counts"].items():
        prev = before["counts"].get(phase, {})
        for kind, v in bucket.items():
            out[kind] += v - prev.get(kind, 0)
    return out


def phase_delta(after, before, kind):
    out = {}
    for phase, bucket in after["counts"].items():
        v = bucket.get(kind, 0) - before["counts"].get(phase, {}).get(kind, 0)
        if v:
            out[phase] = v
    return out


def time_delta_ms(after, before):
    return {
        p: 1e3 * (s - before["seconds"].get(p, 0.0))
        for p, s in after["seconds"].items()
        if s - before["seconds"].get(p, 0.0) > 0
    }
