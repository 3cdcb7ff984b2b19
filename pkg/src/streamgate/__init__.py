"""Fine-grained access control for data streams.

Policies carry filter, map and window obligations.  The gateway merges
them with the requester's own query, deploys the result on the embedded
engine and hands back a stream handle.
"""
from .engine import Engine, StreamHandle, Subscription, render_streamsql
from .gateway import Gateway, RequestOutcome, reconstruct_from_windows
from .merge import MergeResult, PrivilegeEscalation, merge_graphs
from .policy import (
    AccessRequest, Decision, Obligation, Policy, PolicyError, PolicyStore,
    graph_to_obligations, obligations_to_graph, parse_policy, parse_user_query,
    policy_to_xml, user_query_to_xml,
)
from .predicate import Verdict, Warning, analyze_merge, parse_predicate, sat_oracle, to_dnf
from .proxy import CachingProxy
from .querygraph import GPS, WEATHER, FilterOp, MapOp, QueryGraph, Schema, WindowAggOp

__all__ = [
    "AccessRequest", "CachingProxy", "Decision", "Engine", "FilterOp", "GPS", "Gateway",
    "MapOp", "MergeResult", "Obligation", "Policy", "PolicyError", "PolicyStore",
    "PrivilegeEscalation", "QueryGraph", "RequestOutcome", "Schema", "StreamHandle",
    "Subscription", "Verdict", "WEATHER", "Warning", "WindowAggOp", "analyze_merge",
    "graph_to_obligations", "merge_graphs", "obligations_to_graph", "parse_policy",
    "parse_predicate", "parse_user_query", "policy_to_xml", "reconstruct_from_windows",
    "render_streamsql", "sat_oracle", "to_dnf", "user_query_to_xml",
]
