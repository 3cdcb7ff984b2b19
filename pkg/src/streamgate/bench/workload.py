"""Random workloads: query graphs, the policies that enforce them, and requests."""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from ..engine import render_streamsql
from ..merge import visible_attributes
from ..policy import (
    AccessRequest, Policy, graph_to_obligations, parse_policy, policy_to_xml, user_query_to_xml,
)
from ..predicate import Leaf, SimpleExpression, attributes, conjoin, disjoin, sat_oracle
from ..querygraph import GPS, WEATHER, FilterOp, MapOp, QueryGraph, Schema, WindowAggOp

COMBINATIONS = ("F", "M", "A", "FM", "FA", "MA", "FMA")

# plausible value ranges for filter thresholds
FIELD_RANGES = {
    "temperature": (-20.0, 45.0),
    "humidity": (0.0, 100.0),
    "solarradiation": (0.0, 1200.0),
    "rainrate": (0.0, 100.0),
    "windspeed": (0.0, 40.0),
    "winddirection": (0, 359),
    "barometer": (950.0, 1050.0),
    "latitude": (-90.0, 90.0),
    "longitude": (-180.0, 180.0),
    "speed": (0.0, 60.0),
    "accuracy": (1, 100),
}

SUBJECT_ATTR = "subject-id"


@dataclass(frozen=True)
class WorkloadSpec:
    n_direct_queries: int = 1500
    direct_query_dist: tuple = (160, 170, 130, 124, 254, 290, 372)
    n_policies: int = 1000
    n_requests: int = 1500
    zipf_alpha: float = 0.223
    max_rank: int = 300
    seed: int = 0
    sequence: str = "zipf"  # or "unique"

    def __post_init__(self):
        object.__setattr__(self, "direct_query_dist", tuple(self.direct_query_dist))
        if len(self.direct_query_dist) != len(COMBINATIONS):
            raise ValueError(f"direct_query_dist needs {len(COMBINATIONS)} entries")
        if any(r <= 0 for r in self.direct_query_dist):
            raise ValueError("direct_query_dist ratios must be positive")
        if self.zipf_alpha <= 0:
            raise ValueError("zipf_alpha must be positive")
        for name in ("n_direct_queries", "n_policies", "n_requests", "max_rank"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be at least 1")
        if self.sequence not in ("zipf", "unique"):
            raise ValueError(f"unknown sequence kind {self.sequence!r}")


class ZipfSampler:
    """Ranks 1..max_rank with P(r) proportional to r ** -alpha."""

    def __init__(self, alpha: float, max_rank: int, rng: np.random.Generator):
        ranks = np.arange(1, max_rank + 1, dtype=float)
        weights = ranks ** -alpha
        self.probabilities = weights / weights.sum()
        self.rng = rng

    def sample(self, n: int) -> np.ndarray:
        return self.rng.choice(len(self.probabilities), size=n, p=self.probabilities) + 1


@dataclass(frozen=True)
class DirectQuery:
    combination: str
    graph: QueryGraph
    script: str


@dataclass
class Workload:
    spec: WorkloadSpec
    queries: list = field(default_factory=list)     # DirectQuery
    policies: list = field(default_factory=list)    # Policy
    requests: list = field(default_factory=list)    # AccessRequest
    request_policy: list = field(default_factory=list)  # policy index per request

    def policy_graph(self, i: int) -> QueryGraph:
        return self.queries[i % len(self.queries)].graph

    def save(self, directory: str | Path) -> None:
        d = Path(directory)
        (d / "policies").mkdir(parents=True, exist_ok=True)
        (d / "scripts").mkdir(exist_ok=True)
        for i, q in enumerate(self.queries):
            (d / "scripts" / f"q{i:04d}.ssql").write_text(q.script)
        for p in self.policies:
            (d / "policies" / f"{p.policy_id}.xml").write_text(policy_to_xml(p))
        with open(d / "requests.jsonl", "w") as fh:
            for idx, req in zip(self.request_policy, self.requests):
                fh.write(json.dumps({"policy": idx, "credentials": req.credentials,
                                     "resource": req.resource, "action": req.action,
                                     "user_query": req.user_query}) + "\n")
        (d / "workload.json").write_text(json.dumps(asdict(self.spec), indent=2) + "\n")

    @classmethod
    def load(cls, directory: str | Path) -> "Workload":
        d = Path(directory)
        spec = WorkloadSpec(**json.loads((d / "workload.json").read_text()))
        w = generate_workload(spec)
        # files on disk win over regeneration, so edited policies are honoured
        w.policies = [parse_policy((d / "policies" / f"{p.policy_id}.xml").read_text())
                      for p in w.policies]
        w.requests, w.request_policy = [], []
        for line in (d / "requests.jsonl").read_text().splitlines():
            row = json.loads(line)
            w.request_policy.append(row["policy"])
            w.requests.append(AccessRequest(row["credentials"], row["resource"],
                                            row["action"], row["user_query"]))
        return w


def _counts(spec: WorkloadSpec) -> list[int]:
    ratios = np.asarray(spec.direct_query_dist, dtype=float)
    if ratios.sum() == spec.n_direct_queries:
        return [int(r) for r in ratios]
    raw = ratios / ratios.sum() * spec.n_direct_queries
    counts = np.floor(raw).astype(int)
    # largest remainders take the leftover queries
    for i in np.argsort(counts - raw)[: spec.n_direct_queries - counts.sum()]:
        counts[i] += 1
    return counts.tolist()


def _literal(rng: np.random.Generator, attr: str):
    lo, hi = FIELD_RANGES[attr]
    if isinstance(lo, int):
        return int(rng.integers(lo, hi + 1))
    return round(float(rng.uniform(lo, hi)), 1)


def _random_filter(rng: np.random.Generator, schema: Schema) -> FilterOp:
    # a policy that admits no tuple is pointless, so draw until satisfiable
    while True:
        f = _draw_filter(rng, schema)
        if sat_oracle(f.condition)[0]:
            return f


def _draw_filter(rng: np.random.Generator, schema: Schema) -> FilterOp:
    attrs = [n for n in schema.names if n in FIELD_RANGES]
    n = int(rng.integers(1, 4))
    leaves = []
    for _ in range(n):
        attr = attrs[rng.integers(len(attrs))]
        op = (">", ">=", "<", "<=")[rng.integers(4)]
        leaves.append(Leaf(SimpleExpression(attr, op, _literal(rng, attr))))
    if n == 3 and rng.random() < 0.5:
        return FilterOp(disjoin(conjoin(leaves[0], leaves[1]), leaves[2]))
    return FilterOp(conjoin(*leaves) if rng.random() < 0.7 else disjoin(*leaves))


def _random_window(rng: np.random.Generator, schema: Schema, candidates: list[str]) -> WindowAggOp:
    numeric = [a for a in candidates if schema.type_of(a) in ("int", "double")]
    k = int(rng.integers(1, min(3, len(numeric)) + 1))
    attrs = rng.choice(numeric, size=k, replace=False)
    funcs = ("avg", "max", "min", "sum", "count", "lastval", "firstval")
    aggs = tuple((str(a), funcs[rng.integers(len(funcs))]) for a in attrs)
    size = int(rng.integers(2, 21))
    step = int(rng.integers(1, size + 1))
    wtype = "time" if rng.random() < 0.2 else "tuple"
    return WindowAggOp(wtype, size, step, aggs)


def random_graph(rng: np.random.Generator, schema: Schema, combination: str) -> QueryGraph:
    """A valid graph over ``schema`` with the operators named in ``combination``."""
    f = _random_filter(rng, schema) if "F" in combination else None
    numeric = [n for n, t in schema.fields if t in ("int", "double")]
    m = w = None
    if "M" in combination:
        k = int(rng.integers(1, len(schema.names) + 1))
        attrs = set(rng.choice(schema.names, size=k, replace=False).tolist())
        if "A" in combination and not attrs & set(numeric):
            attrs.add(numeric[rng.integers(len(numeric))])
        m = MapOp(attrs)
    if "A" in combination:
        candidates = sorted(m.attributes) if m is not None else list(schema.names)
        w = _random_window(rng, schema, candidates)
    return QueryGraph(schema.stream_name, f, m, w)


def generate_workload(spec: WorkloadSpec, schemas: tuple = (WEATHER, GPS)) -> Workload:
    """Deterministic under ``spec.seed``."""
    rng = np.random.default_rng(spec.seed)
    combos = [c for c, n in zip(COMBINATIONS, _counts(spec)) for _ in range(n)]
    rng.shuffle(combos)
    w = Workload(spec)
    for combo in combos:
        schema = schemas[rng.integers(len(schemas))]
        graph = random_graph(rng, schema, combo)
        w.queries.append(DirectQuery(combo, graph, render_streamsql(graph, schema)))

    for i in range(spec.n_policies):
        graph = w.policy_graph(i)
        w.policies.append(Policy(
            policy_id=f"policy-{i:04d}", resource=graph.source, action="read",
            subjects={SUBJECT_ATTR: f"user-{i:04d}"},
            obligations=graph_to_obligations(graph)))

    if spec.sequence == "unique":
        order = np.arange(spec.n_requests) % spec.n_policies
    else:
        top = min(spec.max_rank, spec.n_policies)
        order = ZipfSampler(spec.zipf_alpha, top, rng).sample(spec.n_requests) - 1
    for idx in order.tolist():
        w.request_policy.append(idx)
        w.requests.append(request_for(w, idx))
    return w


def request_for(w: Workload, i: int) -> AccessRequest:
    """Request that the i-th policy permits, asking for (at most) its graph."""
    graph = w.policy_graph(i)
    visible = visible_attributes(graph)
    if graph.filter is not None and visible is not None:
        # a user filter may only read attributes the policy lets through
        if not attributes(graph.filter.condition) <= visible:
            graph = QueryGraph(graph.source, None, graph.map, graph.window)
    return AccessRequest({SUBJECT_ATTR: f"user-{i:04d}"}, graph.source, "read",
                         user_query_to_xml(graph))
