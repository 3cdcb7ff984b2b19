"""Timing harness: run a workload's request sequence in one of three modes.

``direct``          deploy each request's graph straight on the engine
``gateway``         full access-control workflow, handle released afterwards
``gateway+proxy``   the same behind the caching proxy; handles are kept
"""
from __future__ import annotations

import csv
import math
import time
from dataclasses import dataclass, fields
from pathlib import Path

import numpy as np

from ..engine import Engine
from ..gateway import Gateway
from ..policy import PolicyStore
from ..proxy import CachingProxy
from ..querygraph import GPS, WEATHER
from .workload import Workload

MODES = ("direct", "gateway", "gateway+proxy")
PHASES = ("decision", "graph", "deploy", "total")
# columns that do not depend on the clock
STABLE_COLUMNS = ("index", "mode", "policy", "status", "cache_hit")


@dataclass
class TimingRecord:
    index: int
    mode: str
    policy: int
    status: str
    decision: float = math.nan
    graph: float = math.nan
    deploy: float = math.nan
    total: float = math.nan
    cache_hit: bool | None = None

    def __post_init__(self):
        measured = [getattr(self, p) for p in ("decision", "graph", "deploy")]
        measured = [v for v in measured if not math.isnan(v)]
        if measured and not math.isnan(self.total) and self.total < sum(measured) * 0.999:
            raise ValueError(f"request {self.index}: total below the sum of its phases")


@dataclass
class BenchResult:
    mode: str
    records: list
    policy_load: list  # seconds per loaded policy

    def summary(self) -> dict:
        return summarize(self.records, self.policy_load)

    def write_csv(self, path: str | Path) -> None:
        write_records(self.records, path)


def _local_stack():
    engine = Engine()
    for schema in (WEATHER, GPS):
        engine.register_stream(schema)
    store = PolicyStore(engine.schema)
    return engine, store, Gateway(engine, store)


def _load_policies(workload: Workload, load) -> list[float]:
    out = []
    for policy in workload.policies:
        t0 = time.perf_counter()
        load(policy)
        out.append(time.perf_counter() - t0)
    return out


def run_benchmark(workload: Workload, mode: str, client=None) -> BenchResult:
    """Issue the workload's requests in order and time each one.

    ``client`` is a :class:`~streamgate.server.GatewayClient` for a remote
    gateway; without one an in-process stack is built.  Remote runs only
    measure end-to-end latency, and ``direct`` mode is local only.
    """
    if mode not in MODES:
        raise ValueError(f"unknown mode {mode!r}; expected one of {MODES}")
    if client is not None:
        return _run_remote(workload, mode, client)

    engine, store, gateway = _local_stack()
    records = []
    if mode == "direct":
        for i, idx in enumerate(workload.request_policy):
            graph = workload.policy_graph(idx)
            t0 = time.perf_counter()
            handle = engine.deploy(graph)
            t1 = time.perf_counter()
            records.append(TimingRecord(i, mode, idx, "granted", deploy=t1 - t0, total=t1 - t0))
            engine.withdraw(handle.graph_id)
        return BenchResult(mode, records, [])

    load = _load_policies(workload, store.load_policy)
    proxy = CachingProxy(gateway) if mode == "gateway+proxy" else None
    for i, (idx, req) in enumerate(zip(workload.request_policy, workload.requests)):
        t0 = time.perf_counter()
        if proxy is None:
            outcome, hit = gateway.handle_request(req), None
        else:
            outcome, hit = proxy.proxy_request(req)
        total = time.perf_counter() - t0
        phases = {} if hit else {p: outcome.timings.get(p, math.nan) for p in PHASES[:-1]}
        records.append(TimingRecord(i, mode, idx, outcome.status, total=total,
                                    cache_hit=hit, **phases))
        if proxy is None and outcome.handle is not None:
            gateway.release(outcome.handle, req.credentials)
    return BenchResult(mode, records, load)


def _run_remote(workload: Workload, mode: str, client) -> BenchResult:
    if mode == "direct":
        raise ValueError("direct mode needs the in-process engine")
    load = _load_policies(workload, client.load_policy)
    records = []
    for i, (idx, req) in enumerate(zip(workload.request_policy, workload.requests)):
        t0 = time.perf_counter()
        outcome, hit = client.proxy_request(req)
        total = time.perf_counter() - t0
        records.append(TimingRecord(i, mode, idx, outcome.status, total=total, cache_hit=hit))
        if mode == "gateway" and outcome.handle is not None:
            client.release(outcome.handle, req.credentials)
    return BenchResult(mode, records, load)


# ------------------------------------------------------------------ output

def write_records(records, path: str | Path) -> None:
    names = [f.name for f in fields(TimingRecord)]
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=names)
        writer.writeheader()
        for r in records:
            row = {n: getattr(r, n) for n in names}
            row["cache_hit"] = "" if r.cache_hit is None else int(r.cache_hit)
            for p in PHASES:
                row[p] = "" if math.isnan(row[p]) else f"{row[p]:.9f}"
            writer.writerow(row)


def read_records(path: str | Path) -> list[TimingRecord]:
    out = []
    with open(path, newline="") as fh:
        for row in csv.DictReader(fh):
            out.append(TimingRecord(
                int(row["index"]), row["mode"], int(row["policy"]), row["status"],
                *(float(row[p]) if row[p] else math.nan for p in PHASES),
                cache_hit=None if row["cache_hit"] == "" else row["cache_hit"] == "1"))
    return out


def describe(values) -> dict:
    a = np.asarray([v for v in values if not math.isnan(v)], dtype=float)
    if a.size == 0:
        return {"n": 0}
    p50, p90, p99 = np.percentile(a, [50, 90, 99])
    return {"n": int(a.size), "mean": float(a.mean()), "stddev": float(a.std(ddof=0)),
            "min": float(a.min()), "p50": float(p50), "p90": float(p90),
            "p99": float(p99), "max": float(a.max())}


def summarize(records, policy_load=()) -> dict:
    out = {p: describe(getattr(r, p) for r in records) for p in PHASES}
    out["decision+graph"] = describe(r.decision + r.graph for r in records)
    flagged = [r for r in records if r.cache_hit is not None]
    if flagged:
        hits = [r for r in flagged if r.cache_hit]
        out["hit_rate"] = len(hits) / len(flagged)
        out["hit_total"] = describe(r.total for r in hits)
        out["miss_total"] = describe(r.total for r in flagged if not r.cache_hit)
    if len(policy_load):
        out["policy_load"] = describe(policy_load)
    statuses: dict = {}
    for r in records:
        statuses[r.status] = statuses.get(r.status, 0) + 1
    out["status"] = statuses
    return out
