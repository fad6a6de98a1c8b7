"""Timing, counters, cost models and sweeps."""

from .cost import CostModelInputs, io_cost_model, measured_saving, saving_rate
from .report import compare_report
from .runner import RunRecord, run_strategy
from .sweep import CSV_COLUMNS, SweepSpec, read_csv, run_sweep, summarize
