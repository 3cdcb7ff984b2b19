import numpy as np
import pytest
from hypothesis import assume, given, settings
from hypothesis import strategies as st

from oracles import batch_execute
from strategies import NUMERIC, equivalent, graphs, predicates, random_rows
from streamgate.merge import (
    PrivilegeEscalation, merge_filters, merge_graphs, simplify_conjunction,
    visible_attributes,
)
from streamgate.predicate import Verdict, attributes, parse_predicate, sat_oracle
from streamgate.querygraph import WEATHER, FilterOp, MapOp, QueryGraph, WindowAggOp

LTA_GRAPH = QueryGraph(
    "weather",
    FilterOp.parse("rainrate > 5"),
    MapOp({"samplingtime", "rainrate", "windspeed"}),
    WindowAggOp("tuple", 5, 2, {"samplingtime": "lastval", "rainrate": "avg",
                                "windspeed": "max"}),
)


def user(condition=None, attrs=None, window=None, source="weather"):
    return QueryGraph(
        source,
        FilterOp(parse_predicate(condition, origin="user")) if condition else None,
        MapOp(attrs) if attrs else None,
        window,
    )


class TestFilters:
    def test_tighter_bound_wins(self):
        merged = merge_filters(FilterOp.parse("rainrate > 5"), FilterOp.parse("rainrate > 50"))
        assert str(merged.condition) == "rainrate > 50"

    def test_strict_beats_closed_at_same_literal(self):
        assert str(simplify_conjunction(parse_predicate("a > 3 AND a >= 3"))) == "a > 3"
        assert str(simplify_conjunction(parse_predicate("a <= 3 AND a < 3"))) == "a < 3"

    def test_duplicates_and_other_conjuncts_kept(self):
        p = parse_predicate("a = 1 AND a = 1 AND (b > 2 OR c < 1) AND b != 4")
        assert str(simplify_conjunction(p)) == "a = 1 AND (b > 2 OR c < 1) AND b != 4"

    def test_missing_side(self):
        f = FilterOp.parse("a > 1")
        assert merge_filters(f, None) is f and merge_filters(None, f) is f
        assert merge_filters(None, None) is None

    def test_nr_filter(self):
        gp = QueryGraph("s", FilterOp.parse("a < 4"))
        res = merge_graphs(gp, user("a > 5", source="s"))
        assert res.warning.kind is Verdict.NR
        assert res.warning.witnesses

    def test_pr_filter(self):
        gp = QueryGraph("s", FilterOp.parse("a > 8"))
        res = merge_graphs(gp, user("a > 5", source="s"))
        assert res.warning.kind is Verdict.PR
        assert str(res.graph.filter.condition) == "a > 8"

    @given(predicates(max_leaves=4), predicates(max_leaves=4))
    def test_merge_equivalent_to_conjunction(self, p, q):
        merged = merge_filters(FilterOp(p), FilterOp(q)).condition
        assert all(
            (_eval(p, r) and _eval(q, r)) == _eval(merged, r)
            for r in _grid(p, q))


def _eval(p, row):
    from streamgate.predicate import evaluate
    return evaluate(p, row)


def _grid(*preds):
    from strategies import induced_grid
    return induced_grid(*preds)


class TestMaps:
    def test_subset_is_clean(self):
        res = merge_graphs(QueryGraph("weather", map=MapOp({"samplingtime", "rainrate",
                                                            "windspeed"})),
                           user(attrs={"rainrate"}))
        assert res.warning.kind is Verdict.NONE
        assert res.graph.map.attributes == {"rainrate"}

    def test_equal_sets(self):
        attrs = {"samplingtime", "rainrate"}
        res = merge_graphs(QueryGraph("weather", map=MapOp(attrs)), user(attrs=attrs))
        assert res.warning.kind is Verdict.NONE and res.graph.map.attributes == attrs

    def test_partial_overlap_is_pr(self):
        res = merge_graphs(QueryGraph("weather", map=MapOp({"rainrate", "windspeed"})),
                           user(attrs={"rainrate", "humidity"}))
        assert res.warning.kind is Verdict.PR
        assert res.graph.map.attributes == {"rainrate"}
        assert "humidity" in res.warning.explanation

    def test_disjoint_is_nr_without_graph(self):
        res = merge_graphs(QueryGraph("weather", map=MapOp({"rainrate"})),
                           user(attrs={"humidity"}))
        assert res.warning.kind is Verdict.NR and res.graph is None


class TestWindows:
    def test_coarser_user_window(self):
        u = user("rainrate > 50", window=WindowAggOp("tuple", 10, 2, {"rainrate": "avg"}))
        res = merge_graphs(LTA_GRAPH, u, WEATHER)
        w = res.graph.window
        assert (w.window_type, w.size, w.step, w.aggs) == ("tuple", 10, 2, (("rainrate", "avg"),))
        assert str(res.graph.filter.condition) == "rainrate > 50"
        assert res.warning.kind is Verdict.NONE

    @pytest.mark.parametrize("window", [
        WindowAggOp("tuple", 3, 2, {"rainrate": "avg"}),
        WindowAggOp("tuple", 5, 1, {"rainrate": "avg"}),
        WindowAggOp("time", 10, 2, {"rainrate": "avg"}),
    ])
    def test_finer_or_different_window_escalates(self, window):
        with pytest.raises(PrivilegeEscalation):
            merge_graphs(LTA_GRAPH, user(window=window))

    def test_function_conflict_is_nr_without_graph(self):
        u = user(window=WindowAggOp("tuple", 6, 2, {"rainrate": "max", "windspeed": "max"}))
        res = merge_graphs(LTA_GRAPH, u)
        assert res.warning.kind is Verdict.NR and res.graph is None

    def test_unpermitted_aggregate_is_pr(self):
        u = user(window=WindowAggOp("tuple", 6, 2, {"rainrate": "avg", "humidity": "min"}))
        res = merge_graphs(LTA_GRAPH, u)
        assert res.warning.kind is Verdict.PR
        assert res.graph.window.aggs == (("rainrate", "avg"),)

    def test_no_common_aggregate(self):
        u = user(window=WindowAggOp("tuple", 6, 2, {"humidity": "min"}))
        res = merge_graphs(LTA_GRAPH, u)
        assert res.warning.kind is Verdict.NR and res.graph is None

    def test_policy_window_adopted_for_projection(self):
        res = merge_graphs(LTA_GRAPH, user(attrs={"rainrate"}))
        assert res.graph.window.aggs == (("rainrate", "avg"),)
        assert res.graph.window.size == 5

    def test_projection_outside_policy_window(self):
        g = QueryGraph("weather", map=MapOp({"rainrate", "humidity"}),
                       window=WindowAggOp("tuple", 5, 2, {"rainrate": "avg"}))
        res = merge_graphs(g, user(attrs={"humidity"}))
        assert res.warning.kind is Verdict.NR and res.graph is None


    def test_user_window_over_hidden_attributes(self):
        gp = QueryGraph("weather", map=MapOp({"rainrate", "samplingtime"}))
        both = WindowAggOp("tuple", 4, 2, {"rainrate": "max", "humidity": "max"})
        res = merge_graphs(gp, user(window=both), WEATHER)
        assert res.warning.kind is Verdict.PR
        assert res.graph.window.aggs == (("rainrate", "max"),)
        hidden = WindowAggOp("tuple", 4, 2, {"humidity": "max"})
        res = merge_graphs(gp, user(window=hidden), WEATHER)
        assert res.warning.kind is Verdict.NR and res.graph is None


class TestGraphs:
    def test_empty_user_query_gives_policy_graph(self):
        res = merge_graphs(LTA_GRAPH, QueryGraph("weather"), WEATHER)
        assert res.graph == LTA_GRAPH and res.warning.kind is Verdict.NONE

    def test_filter_on_hidden_attribute(self):
        with pytest.raises(PrivilegeEscalation):
            merge_graphs(LTA_GRAPH, user("humidity > 3"))

    def test_different_streams(self):
        with pytest.raises(ValueError):
            merge_graphs(LTA_GRAPH, QueryGraph("gps"))

    def test_visible_attributes(self):
        assert visible_attributes(LTA_GRAPH) == {"samplingtime", "rainrate", "windspeed"}
        assert visible_attributes(QueryGraph("s")) is None
        g = QueryGraph("s", window=WindowAggOp("tuple", 2, 1, {"a": "sum"}))
        assert visible_attributes(g) == {"a"}


def _merge_or_skip(gp, gu):
    try:
        return merge_graphs(gp, gu, NUMERIC)
    except PrivilegeEscalation:
        assume(False)


def _project(rows, from_names, to_names):
    idx = [from_names.index(n) for n in to_names]
    return [tuple(r[i] for i in idx) for r in rows]


class TestProperties:
    @settings(max_examples=200)
    @given(graphs(), graphs(), st.integers(0, 2**32 - 1))
    def test_dominance(self, gp, gu, seed):
        res = _merge_or_skip(gp, gu)
        if res.graph is None:
            return
        g = res.graph
        if gp.window is None:
            assert g.window is None or gu.window is not None
        else:
            w, pw = g.window, gp.window
            assert w.window_type == pw.window_type
            assert w.size >= pw.size and w.step >= pw.step
            assert set(w.aggs) <= set(pw.aggs)
        if gp.map is not None:
            assert g.map is not None and g.map.attributes <= gp.map.attributes
        if g.window is None and gp.window is None:
            rows = random_rows(np.random.default_rng(seed), 40)
            names = lambda m: [n for n in NUMERIC.names if m is None or n in m.attributes]
            got = batch_execute(g, NUMERIC, rows)
            allowed = _project(batch_execute(gp, NUMERIC, rows), names(gp.map), names(g.map))
            assert set(got) <= set(allowed)

    @settings(max_examples=200)
    @given(graphs())
    def test_self_merge_idempotent(self, gp):
        visible = visible_attributes(gp)
        assume(gp.filter is None or visible is None
               or attributes(gp.filter.condition) <= visible)
        res = merge_graphs(gp, gp, NUMERIC)
        g = res.graph
        assert g.map == gp.map and g.window == gp.window
        if gp.filter is None:
            assert g.filter is None
        else:
            assert equivalent(g.filter.condition, gp.filter.condition)

    @settings(max_examples=300)
    @given(predicates(max_leaves=4), predicates(max_leaves=4), st.integers(0, 2**32 - 1))
    def test_nr_produces_nothing(self, p, q, seed):
        gp = QueryGraph("s", FilterOp(p))
        res = merge_graphs(gp, QueryGraph("s", FilterOp(q)), NUMERIC)
        if res.warning.kind is not Verdict.NR:
            return
        assert not sat_oracle(res.graph.filter.condition)[0]
        rows = random_rows(np.random.default_rng(seed), 50)
        assert batch_execute(res.graph, NUMERIC, rows) == []
