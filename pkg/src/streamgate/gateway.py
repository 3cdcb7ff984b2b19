"""Policy enforcement point and query-graph lifecycle.

The gateway turns an access request into a deployed, policy-enforcing
query graph.  It keeps at most one active graph per principal and stream
(several windowed views of one stream can be combined to recover the raw
values, see :func:`reconstruct_from_windows`), and withdraws every graph a
policy spawned when that policy is removed or replaced.
"""
from __future__ import annotations

import logging
import threading
import time
from dataclasses import dataclass, field
from typing import Sequence

from .engine import Engine, StreamHandle, UnknownGraphError
from .merge import PrivilegeEscalation, merge_graphs
from .policy import AccessRequest, PolicyStore, fingerprint, parse_user_query
from .predicate import Verdict, Warning
from .querygraph import QueryGraph

log = logging.getLogger(__name__)

GRANTED = "granted"
DENIED = "denied"
REJECTED = "rejected-escalation"
WARNED_NR = "warned-nr"
WARNED_PR = "warned-pr"
GRANTED_PR = "warned-pr-granted"
BUSY = "busy"

STATUSES = (GRANTED, DENIED, REJECTED, WARNED_NR, WARNED_PR, GRANTED_PR, BUSY)


class GatewayError(Exception):
    pass


class UnknownHandleError(GatewayError, KeyError):
    pass


class AuthorizationError(GatewayError, PermissionError):
    pass


@dataclass(frozen=True)
class RequestOutcome:
    status: str
    handle: StreamHandle | None = None
    warning: Warning | None = None
    timings: dict = field(default_factory=dict, compare=False, repr=False)

    def __post_init__(self):
        if self.status not in STATUSES:
            raise ValueError(f"unknown status {self.status!r}")
        if self.status in (GRANTED, GRANTED_PR) and self.handle is None:
            raise ValueError(f"{self.status} outcome needs a handle")
        if self.status in (WARNED_NR, WARNED_PR, BUSY) and self.handle is not None:
            raise ValueError(f"{self.status} outcome carries no handle")

    @property
    def granted(self) -> bool:
        return self.status in (GRANTED, GRANTED_PR)


class ActiveRegistry:
    """Which graphs are live, keyed by principal/stream and by policy."""

    def __init__(self):
        self.by_principal: dict[tuple, str] = {}
        self.by_policy: dict[str, set[str]] = {}
        self.owner: dict[str, tuple] = {}
        self.policy_of: dict[str, str] = {}

    def add(self, key: tuple, graph_id: str, policy_id: str) -> None:
        self.by_principal[key] = graph_id
        self.by_policy.setdefault(policy_id, set()).add(graph_id)
        self.owner[graph_id] = key
        self.policy_of[graph_id] = policy_id

    def remove(self, graph_id: str) -> None:
        key = self.owner.pop(graph_id)
        if self.by_principal.get(key) == graph_id:
            del self.by_principal[key]
        policy_id = self.policy_of.pop(graph_id)
        graphs = self.by_policy[policy_id]
        graphs.discard(graph_id)
        if not graphs:
            del self.by_policy[policy_id]

    def graph_ids(self) -> set[str]:
        return set(self.owner)


_RESERVED = "<reserved>"


class Gateway:
    """Five-step request workflow over a policy store and an engine.

    ``strict`` blocks partial-result (PR) merges instead of granting them
    with a warning.  ``leak_guard`` enforces one active graph per principal
    and stream; disabling it exists for tests of the reconstruction attack.
    """

    def __init__(self, engine: Engine, store: PolicyStore, *,
                 strict: bool = False, leak_guard: bool = True):
        self.engine = engine
        self.store = store
        self.strict = strict
        self.leak_guard = leak_guard
        self.registry = ActiveRegistry()
        self._lock = threading.Lock()
        self._extra = 0
        store.add_listener(self.on_policy_change)

    def handle_request(self, req: AccessRequest) -> RequestOutcome:
        t_start = time.perf_counter()
        timings: dict = {}
        schema = self.engine.schema(req.resource)

        # 1. the user query becomes a graph
        user_graph = None
        if req.user_query is not None and schema is not None:
            user_graph = parse_user_query(req.user_query, schema)
        t_parsed = time.perf_counter()

        # 2. decision
        decision = self.store.evaluate(req)
        t_decided = time.perf_counter()
        timings["decision"] = t_decided - t_parsed
        if decision.verdict != "Permit" or schema is None:
            return self._done(RequestOutcome(DENIED), timings, t_start)

        # 3. single active query per principal and stream, reserved atomically
        key = (fingerprint(req.credentials), req.resource)
        if self.leak_guard:
            with self._lock:
                if key in self.registry.by_principal:
                    return self._done(RequestOutcome(BUSY), timings, t_start)
                self.registry.by_principal[key] = _RESERVED
        else:
            with self._lock:
                self._extra += 1
                key = key + (self._extra,)
                self.registry.by_principal[key] = _RESERVED

        deployed = False
        try:
            # 4. merge policy and user graphs
            t_graph = time.perf_counter()
            policy_graph = self.store.graph_for(decision, req.resource)
            if user_graph is None:
                user_graph = QueryGraph(req.resource)
            try:
                merged, warning = merge_graphs(policy_graph, user_graph, schema)
            except PrivilegeEscalation as exc:
                timings["graph"] = time.perf_counter() - t_graph + (t_parsed - t_start)
                w = Warning(Verdict.NR, f"privilege escalation: {exc}")
                return self._done(RequestOutcome(REJECTED, warning=w), timings, t_start)
            timings["graph"] = time.perf_counter() - t_graph + (t_parsed - t_start)

            if warning.kind is Verdict.NR or merged is None:
                return self._done(RequestOutcome(WARNED_NR, warning=warning), timings, t_start)
            if warning.kind is Verdict.PR and self.strict:
                return self._done(RequestOutcome(WARNED_PR, warning=warning), timings, t_start)

            # 5. deploy and register under the granting policy
            t_deploy = time.perf_counter()
            handle = self.engine.deploy(merged)
            timings["deploy"] = time.perf_counter() - t_deploy
            with self._lock:
                del self.registry.by_principal[key]
                current = self.store.get(decision.policy_id)
                if current is not None and current.obligations == decision.obligations:
                    self.registry.add(key, handle.graph_id, decision.policy_id)
                    deployed = True
            if not deployed:
                # policy removed or replaced while we were deploying
                self.engine.withdraw(handle.graph_id)
                return self._done(RequestOutcome(DENIED), timings, t_start)
            if warning.kind is Verdict.PR:
                outcome = RequestOutcome(GRANTED_PR, handle, warning)
            else:
                outcome = RequestOutcome(GRANTED, handle)
            return self._done(outcome, timings, t_start)
        finally:
            if not deployed:
                with self._lock:
                    if self.registry.by_principal.get(key) == _RESERVED:
                        del self.registry.by_principal[key]

    @staticmethod
    def _done(outcome: RequestOutcome, timings: dict, t_start: float) -> RequestOutcome:
        timings["total"] = time.perf_counter() - t_start
        outcome.timings.update(timings)
        return outcome

    def release(self, handle, credentials) -> None:
        graph_id = StreamHandle(str(handle)).graph_id
        with self._lock:
            owner = self.registry.owner.get(graph_id)
            if owner is None:
                raise UnknownHandleError(f"no active graph for {handle}")
            if owner[0] != fingerprint(credentials):
                raise AuthorizationError(f"{handle} belongs to another principal")
            self.registry.remove(graph_id)
        self._withdraw(graph_id)

    def on_policy_change(self, policy_id: str, change: str = "removed") -> int:
        """Withdraw every graph spawned by ``policy_id``; returns how many."""
        if change not in ("removed", "modified"):
            raise ValueError(f"unknown change {change!r}")
        with self._lock:
            graphs = sorted(self.registry.by_policy.get(policy_id, ()))
            for graph_id in graphs:
                self.registry.remove(graph_id)
        for graph_id in graphs:
            self._withdraw(graph_id)
        if graphs:
            log.info("policy %s %s: withdrew %d graph(s)", policy_id, change, len(graphs))
        return len(graphs)

    def _withdraw(self, graph_id: str) -> None:
        try:
            self.engine.withdraw(graph_id)
        except UnknownGraphError:
            log.warning("graph %s already gone from the engine", graph_id)

    def is_live(self, handle) -> bool:
        return self.engine.is_live(handle)

    def check_consistency(self) -> None:
        """Raise AssertionError if the registry disagrees with itself or the engine."""
        with self._lock:
            principal = {g for g in self.registry.by_principal.values() if g != _RESERVED}
            policy = set().union(*self.registry.by_policy.values()) if self.registry.by_policy else set()
            owned = self.registry.graph_ids()
        assert principal == policy == owned, (principal, policy, owned)
        live = set(self.engine.deployed_ids)
        assert owned <= live, owned - live


# ----------------------------------------------------------- reconstruction

def reconstruct_from_windows(streams: Sequence[tuple[int, int, Sequence]], n: int, m: int,
                             aggregate: str = "sum") -> list:
    """Recover raw values from windowed aggregates of sizes n .. n+m, step m.

    ``streams`` holds ``(size, step, outputs)`` triples from the same source
    stream.  Consecutive differences of the window sums isolate single
    values; interleaving them gives the source from index ``n`` on.  With
    ``aggregate='avg'`` each output is first scaled back to a sum.
    """
    if aggregate not in ("sum", "avg"):
        raise ValueError(f"cannot invert aggregate {aggregate!r}")
    if m < 1 or n < 1:
        raise ValueError("window size and step must be positive")
    by_size = {}
    for size, step, outputs in streams:
        if step != m:
            raise ValueError(f"window of size {size} has step {step}, expected {m}")
        by_size[size] = list(outputs)
    needed = list(range(n, n + m + 1))
    if sorted(by_size) != needed:
        raise ValueError(f"need windows of sizes {needed}, got {sorted(by_size)}")

    sums = []
    for size in needed:
        seq = by_size[size]
        sums.append([v * size for v in seq] if aggregate == "avg" else seq)
    lengths = [len(s) for s in sums]
    for shorter, longer in zip(lengths[1:], lengths):
        if shorter > longer or longer - shorter > 1:
            raise ValueError(f"inconsistent sequence lengths {lengths}")

    count = lengths[-1]
    diffs = [[sums[j][k] - sums[j - 1][k] for k in range(count)] for j in range(1, m + 1)]
    return [diffs[j][k] for k in range(count) for j in range(m)]
