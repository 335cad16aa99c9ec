"""Desk-scale YCSB-style benchmark harness."""

from .report import COLUMNS, report, to_csv, to_text
from .runner import RunMetrics, chi_sweep, load_store, run_phase, run_workload
from .workload import ScrambledZipfian, WorkloadSpec, XorShift64Star, ZipfianRanks

__all__ = [
    "COLUMNS",
    "RunMetrics",
    "ScrambledZipfian",
    "WorkloadSpec",
    "XorShift64Star",
    "ZipfianRanks",
    "chi_sweep",
    "load_store",
    "report",
    "run_phase",
    "run_workload",
    "to_csv",
    "to_text",
]
