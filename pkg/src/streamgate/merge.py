"""Merging a policy-derived query graph with a user query graph.

Each operator kind is merged separately.  The merged graph never exposes
more than the policy graph: attributes are intersected, filters are
conjoined, and a user window may only be coarser than the policy window.
"""
from __future__ import annotations

import logging
from typing import NamedTuple

from .predicate import (
    And, DnfCapacityError, Leaf, Predicate, Verdict, Warning, analyze_merge, attributes,
)
from .querygraph import FilterOp, MapOp, QueryGraph, Schema, WindowAggOp, validate_graph

log = logging.getLogger(__name__)


class PrivilegeEscalation(Exception):
    """The user query asks for finer-grained data than the policy allows."""


class EmptyResult(Exception):
    """An operator merge leaves nothing to return."""


class MergeResult(NamedTuple):
    graph: QueryGraph | None
    warning: Warning


# ---------------------------------------------------------------- filters

def _conjuncts(p: Predicate) -> list[Predicate]:
    if isinstance(p, And):
        return _conjuncts(p.left) + _conjuncts(p.right)
    return [p]


def _tighter(a, b, lower: bool):
    if a.literal != b.literal:
        if lower:
            return a if a.literal > b.literal else b
        return a if a.literal < b.literal else b
    strict = ">" if lower else "<"
    return a if a.op == strict else b


def simplify_conjunction(p: Predicate) -> Predicate:
    """Drop duplicate conjuncts and collapse same-direction bounds.

    ``x > 5 AND x > 50`` becomes ``x > 50``; equalities, inequalities and
    compound conjuncts are kept as they are.
    """
    kept: list = []
    seen: set = set()
    bounds: dict = {}
    for part in _conjuncts(p):
        if isinstance(part, Leaf) and part.expr.op in ("<", "<=", ">", ">="):
            e = part.expr
            key = (e.attribute, e.op in (">", ">="))
            if key in bounds:
                slot = bounds[key]
                kept[slot] = Leaf(_tighter(kept[slot].expr, e, key[1]))
            else:
                bounds[key] = len(kept)
                kept.append(part)
            continue
        text = str(part)
        if text in seen:
            continue
        seen.add(text)
        kept.append(part)
    result = kept[0]
    for part in kept[1:]:
        result = And(result, part)
    return result


def merge_filters(f1: FilterOp | None, f2: FilterOp | None) -> FilterOp | None:
    if f1 is None or f2 is None:
        return f1 if f2 is None else f2
    return FilterOp(simplify_conjunction(And(f1.condition, f2.condition)))


def filter_verdict(f1: FilterOp | None, f2: FilterOp | None) -> Warning:
    if f1 is None or f2 is None:
        return Warning()
    try:
        return analyze_merge(f1.condition, f2.condition)
    except DnfCapacityError as exc:
        log.warning("filter analysis skipped: %s", exc)
        return Warning()


# ---------------------------------------------------------------- maps

def merge_maps(m1: MapOp, m2: MapOp) -> MapOp:
    common = m1.attributes & m2.attributes
    if not common:
        raise EmptyResult(
            f"no requested attribute is visible: policy {sorted(m1.attributes)}, "
            f"query {sorted(m2.attributes)}")
    return MapOp(common)


def map_verdict(m1: MapOp, m2: MapOp) -> Verdict:
    if not m1.attributes & m2.attributes:
        return Verdict.NR
    if m2.attributes <= m1.attributes:
        return Verdict.NONE
    return Verdict.PR


# ---------------------------------------------------------------- windows

def check_window_escalation(a1: WindowAggOp, a2: WindowAggOp) -> None:
    if a1.window_type != a2.window_type:
        raise PrivilegeEscalation(
            f"window type {a2.window_type} differs from permitted {a1.window_type}")
    if a1.size > a2.size:
        raise PrivilegeEscalation(
            f"window size {a2.size} is finer than permitted size {a1.size}")
    if a1.step > a2.step:
        raise PrivilegeEscalation(
            f"window step {a2.step} is finer than permitted step {a1.step}")


def merge_windows(a1: WindowAggOp, a2: WindowAggOp) -> WindowAggOp:
    check_window_escalation(a1, a2)
    common = set(a1.aggs) & set(a2.aggs)
    if not common:
        raise EmptyResult("no requested aggregate is permitted by the policy window")
    return WindowAggOp(a1.window_type, a2.size, a2.step, tuple(common))


def window_verdict(a1: WindowAggOp, a2: WindowAggOp) -> Verdict:
    """Verdict for a window pair that passed the escalation check."""
    permitted = a1.functions
    if any(attr in permitted and permitted[attr] != func for attr, func in a2.aggs):
        return Verdict.NR
    if all(pair in a1.aggs for pair in a2.aggs):
        return Verdict.NONE
    return Verdict.PR


# ---------------------------------------------------------------- graphs

def visible_attributes(gp: QueryGraph) -> frozenset | None:
    """Raw attributes the policy lets a user observe (None: all of them)."""
    if gp.map is not None:
        return gp.map.attributes
    if gp.window is not None:
        return frozenset(a for a, _ in gp.window.aggs)
    return None


def merge_graphs(gp: QueryGraph, gu: QueryGraph, schema: Schema | None = None) -> MergeResult:
    """Merge policy graph ``gp`` with user graph ``gu``.

    Returns the merged graph and the aggregated warning.  The graph is None
    when a structural NR (no common attribute or aggregate) leaves nothing
    to deploy.  Raises PrivilegeEscalation when the user window is finer
    than the policy window or the user filter reads hidden attributes.
    """
    if gp.source != gu.source:
        raise ValueError(f"cannot merge graphs over {gp.source!r} and {gu.source!r}")

    visible = visible_attributes(gp)
    if gu.filter is not None and visible is not None:
        hidden = attributes(gu.filter.condition) - visible
        if hidden:
            raise PrivilegeEscalation(
                f"query filter reads attributes hidden by policy: {sorted(hidden)}")
    if gp.window is not None and gu.window is not None:
        check_window_escalation(gp.window, gu.window)

    notes: list[str] = []
    verdicts: list[Verdict] = []
    unbuildable = False

    fw = filter_verdict(gp.filter, gu.filter)
    verdicts.append(fw.kind)
    if fw.kind is not Verdict.NONE:
        notes.append(f"filter: {fw.explanation}")
    merged_filter = merge_filters(gp.filter, gu.filter)

    merged_map = gp.map or gu.map
    if gp.map is not None and gu.map is not None:
        kind = map_verdict(gp.map, gu.map)
        verdicts.append(kind)
        if kind is Verdict.NR:
            notes.append("map: none of the requested attributes is visible")
            unbuildable = True
            merged_map = None
        else:
            merged_map = merge_maps(gp.map, gu.map)
            if kind is Verdict.PR:
                extra = sorted(gu.map.attributes - gp.map.attributes)
                notes.append(f"map: attributes {extra} are not visible under the policy")

    merged_window = gp.window or gu.window
    if gp.window is not None and gu.window is not None:
        kind = window_verdict(gp.window, gu.window)
        verdicts.append(kind)
        try:
            merged_window = merge_windows(gp.window, gu.window)
        except EmptyResult as exc:
            merged_window = None
            unbuildable = True
            kind = Verdict.NR
            verdicts.append(kind)
            notes.append(f"window: {exc}")
        else:
            if kind is Verdict.NR:
                # NR graphs are never deployed, even if other aggregates survive
                unbuildable = True
                notes.append("window: a requested attribute uses a different aggregate "
                             "function than the policy permits")
            elif kind is Verdict.PR:
                notes.append("window: some requested aggregates are not permitted")
    elif gu.window is None and gp.window is not None and gu.map is not None and merged_map:
        # Adopted policy window, restricted to what the user projected.
        kept = tuple(p for p in gp.window.aggs if p[0] in merged_map.attributes)
        if kept:
            w = gp.window
            merged_window = WindowAggOp(w.window_type, w.size, w.step, kept)
        else:
            merged_window = None
            unbuildable = True
            verdicts.append(Verdict.NR)
            notes.append("window: the policy only releases aggregates of attributes "
                         "the query does not project")
    elif gp.window is None and gu.window is not None and merged_map is not None:
        # User window over raw attributes; only the visible ones survive.
        kept = tuple(p for p in gu.window.aggs if p[0] in merged_map.attributes)
        if not kept:
            merged_window = None
            unbuildable = True
            verdicts.append(Verdict.NR)
            notes.append("window: every requested aggregate reads a hidden attribute")
        elif len(kept) < len(gu.window.aggs):
            w = gu.window
            merged_window = WindowAggOp(w.window_type, w.size, w.step, kept)
            verdicts.append(Verdict.PR)
            hidden = sorted(a for a, _ in w.aggs if a not in merged_map.attributes)
            notes.append(f"window: aggregates of {hidden} are not visible under the policy")

    if Verdict.NR in verdicts:
        kind = Verdict.NR
    elif Verdict.PR in verdicts:
        kind = Verdict.PR
    else:
        kind = Verdict.NONE
    witnesses = fw.witnesses if kind is not Verdict.NONE else ()
    warning = Warning(kind, "; ".join(notes), witnesses)

    if unbuildable:
        return MergeResult(None, warning)
    graph = QueryGraph(gp.source, merged_filter, merged_map, merged_window)
    if schema is not None:
        validate_graph(graph, schema)
    return MergeResult(graph, warning)
