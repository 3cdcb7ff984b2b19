"""Workload generation, timing harness and reporting."""
from .harness import MODES, BenchResult, TimingRecord, run_benchmark, summarize
from .workload import Workload, WorkloadSpec, ZipfSampler, generate_workload

__all__ = ["MODES", "BenchResult", "TimingRecord", "Workload", "WorkloadSpec",
           "ZipfSampler", "generate_workload", "run_benchmark", "summarize"]
