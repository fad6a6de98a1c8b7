"""Strategy comparison summaries."""

from __future__ import annotations

from ..errors import ComparabilityError


def _get(rec, key):
    return rec[key] if isinstance(rec, dict) else getattr(rec, key)


def _ratio(a, b):
    return a / b if b else float("inf") if a else 1.0


def compare_report(records, verification=None):
    """Speedups and counter ratios between strategy runs of one workload.

    ``records`` maps strategy letter to a :class:`RunRecord` (or its dict).
    ``speedup["F/S"]`` is seconds(S) / seconds(F), i.e. how many times
    faster F ran.  ``verification`` (a verifier report) is passed through as
    the equivalence flag.
    """
    records = {k.upper(): v for k, v in records.items()}
    if not records:
        raise ComparabilityError("no runs to compare")
    loads = {k: _get(r, "workload") for k, r in records.items()}
    first = next(iter(loads.values()))
    for k, w in loads.items():
        if w != first:
            raise ComparabilityError(f"run {k} has workload {w}, expected {first}")
    secs = {k: _get(r, "seconds") for k, r in records.items()}
    counts = {k: _get(r, "counts") for k, r in records.items()}
    phases = {k: _get(r, "phase_seconds") for k, r in records.items()}
    out = {"seconds": secs, "speedup": {}, "count_ratio": {}, "phases": phases}
    for fast, slow in (("F", "S"), ("F", "M"), ("S", "M")):
        if fast in secs and slow in secs:
            key = f"{fast}/{slow}"
            out["speedup"][key] = _ratio(secs[slow], secs[fast])
            out["count_ratio"][key] = {
                kind: _ratio(counts[slow].get(kind, 0), counts[fast].get(kind, 0))
                for kind in ("mults", "pages_read", "field_reads")
            }
    if verification is not None:
        out["equivalence_pass"] = bool(verification.get("pass"))
    return out
