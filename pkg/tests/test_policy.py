import threading

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import LTA_POLICY, HEAVY_RAIN_QUERY, LTA, policy_doc, user_query
from streamgate.bench.workload import COMBINATIONS, random_graph
from streamgate.policy import (
    AccessRequest, AttributeAssignment, Decision, Obligation, PolicyError, PolicyStore,
    UnknownStreamError, fingerprint, graph_to_obligations, normalize_function,
    obligations_to_graph, parse_policy, parse_request, parse_user_query, policy_to_xml,
    request_to_xml, user_query_key, user_query_to_xml,
)
from streamgate.querygraph import GPS, WEATHER, FilterOp, MapOp, QueryGraph, WindowAggOp

SCHEMAS = {"weather": WEATHER, "gps": GPS}


@pytest.fixture
def store():
    return PolicyStore(SCHEMAS)


def lta_request(query=None, resource="weather", **creds):
    return AccessRequest(creds or dict(LTA), resource, "read", query)


class TestPolicyDocuments:
    def test_lta_policy_parse(self):
        p = parse_policy(LTA_POLICY)
        assert p.policy_id == "lta-weather" and p.resource == "weather"
        assert p.subjects == (("organisation", "LTA"),)
        assert [o.obligation_id.rsplit(":", 1)[1] for o in p.obligations] == [
            "stream-filter", "stream-map", "stream-window"]

    def test_lta_policy_compiles(self):
        g = obligations_to_graph(parse_policy(LTA_POLICY).obligations, WEATHER)
        assert str(g.filter.condition) == "rainrate > 5"
        assert g.map.attributes == {"samplingtime", "rainrate", "windspeed"}
        w = g.window
        assert (w.window_type, w.size, w.step) == ("tuple", 5, 2)
        assert w.functions == {"samplingtime": "lastval", "rainrate": "avg", "windspeed": "max"}

    def test_xml_round_trip(self):
        p = parse_policy(LTA_POLICY)
        assert parse_policy(policy_to_xml(p)) == p

    def test_missing_window_size(self):
        with pytest.raises(PolicyError):
            Obligation("exacml:obligation:stream-window", [
                AttributeAssignment("x:stream-window-type-id", "string", "tuple"),
                AttributeAssignment("x:stream-window-step-id", "integer", "2"),
                AttributeAssignment("x:stream-window-attr-id", "string", "rainrate:avg"),
            ])

    def test_non_integer_size(self):
        with pytest.raises(PolicyError):
            AttributeAssignment("x:stream-window-size-id",
                                "http://www.w3.org/2001/XMLSchema#integer", "five")

    def test_unknown_obligation(self):
        with pytest.raises(PolicyError):
            Obligation("exacml:obligation:stream-join", [])

    def test_empty_obligations_give_identity(self):
        assert obligations_to_graph((), WEATHER) == QueryGraph("weather")

    def test_bad_condition(self):
        obl = [Obligation("exacml:obligation:stream-filter", [
            AttributeAssignment("x:stream-filter-condition-id", "string", "rainrate >")])]
        with pytest.raises(PolicyError):
            obligations_to_graph(obl, WEATHER)

    def test_function_aliases(self):
        assert normalize_function(" LastValue ") == "lastval"
        assert normalize_function("AVERAGE") == "avg"

    def test_malformed_xml(self):
        with pytest.raises(PolicyError):
            parse_policy("<Policy PolicyId='x'")

    @settings(max_examples=100)
    @given(st.integers(0, 2**32 - 1), st.sampled_from(COMBINATIONS),
           st.sampled_from([WEATHER, GPS]))
    def test_graph_obligation_round_trip(self, seed, combination, schema):
        g = random_graph(np.random.default_rng(seed), schema, combination)
        assert obligations_to_graph(graph_to_obligations(g), schema) == g


class TestUserQueries:
    def test_heavy_rain_query(self):
        g = parse_user_query(HEAVY_RAIN_QUERY, WEATHER)
        assert str(g.filter.condition) == "rainrate > 50"
        assert g.filter.condition.expr.origin == "user"
        assert g.map.attributes == {"rainrate"}
        assert g.window == WindowAggOp("tuple", 10, 2, {"rainrate": "avg"})

    def test_stream_only_is_identity(self):
        assert parse_user_query('<UserQuery><Stream name="gps"/></UserQuery>', GPS).is_identity

    def test_step_above_size(self):
        with pytest.raises(PolicyError):
            parse_user_query(user_query(window=("tuple", 2, 3, ["avg(rainrate)"])), WEATHER)

    def test_wrong_stream(self):
        with pytest.raises(PolicyError):
            parse_user_query(user_query("gps"), WEATHER)

    def test_unescaped_less_than(self):
        doc = ('<UserQuery><Stream name="weather"/><Filter><FilterCondition>'
               "rainrate < 3 AND windspeed >= 1</FilterCondition></Filter></UserQuery>")
        g = parse_user_query(doc, WEATHER)
        assert str(g.filter.condition) == "rainrate < 3 AND windspeed >= 1"

    def test_escaped_less_than_not_doubled(self):
        g = parse_user_query(user_query(condition="rainrate < 3"), WEATHER)
        assert str(g.filter.condition) == "rainrate < 3"

    def test_bad_aggregate(self):
        with pytest.raises(PolicyError):
            parse_user_query(user_query(window=("tuple", 2, 1, ["rainrate"])), WEATHER)

    @settings(max_examples=100)
    @given(st.integers(0, 2**32 - 1), st.sampled_from(COMBINATIONS))
    def test_xml_round_trip(self, seed, combination):
        g = random_graph(np.random.default_rng(seed), WEATHER, combination)
        assert parse_user_query(user_query_to_xml(g), WEATHER) == g

    def test_key_ignores_spelling(self):
        a = user_query(condition="RainRate > 50", map_attrs=["RAINRATE"])
        b = user_query(condition="rainrate>50", map_attrs=["rainrate"])
        assert user_query_key(a) == user_query_key(b)
        assert user_query_key(None) == ""


class TestRequests:
    def test_round_trip(self):
        req = lta_request(HEAVY_RAIN_QUERY)
        back = parse_request(request_to_xml(req))
        assert back.credentials == LTA and back.resource == "weather"
        assert parse_user_query(back.user_query, WEATHER) == parse_user_query(HEAVY_RAIN_QUERY,
                                                                               WEATHER)

    def test_fingerprint_order_and_escaping(self):
        assert fingerprint({"b": "1", "a": "2"}) == fingerprint({"a": "2", "b": "1"})
        assert fingerprint({"a": "x&b=y"}) != fingerprint({"a": "x", "b": "y"})

    def test_decision_invariants(self):
        with pytest.raises(ValueError):
            Decision("Deny", obligations=(object(),))
        with pytest.raises(ValueError):
            Decision("Maybe")


class TestStore:
    def test_permit_with_obligations(self, store):
        store.load_policy(LTA_POLICY)
        d = store.evaluate(lta_request())
        assert d.verdict == "Permit" and len(d.obligations) == 3
        assert d.policy_id == "lta-weather"
        assert store.graph_for(d, "weather").window.size == 5

    def test_not_applicable(self, store):
        store.load_policy(LTA_POLICY)
        assert store.evaluate(lta_request(resource="gps")).verdict == "NotApplicable"
        assert store.evaluate(lta_request(organisation="NEA")).verdict == "NotApplicable"

    def test_extra_credentials_still_match(self, store):
        store.load_policy(LTA_POLICY)
        d = store.evaluate(lta_request(organisation="LTA", role="analyst"))
        assert d.verdict == "Permit"

    def test_deny(self, store):
        store.load_policy(policy_doc("deny-all", effect="Deny"))
        d = store.evaluate(lta_request())
        assert d.verdict == "Deny" and d.obligations == ()

    def test_unknown_stream(self, store):
        with pytest.raises(UnknownStreamError):
            store.load_policy(policy_doc("p", resource="traffic"))

    def test_invalid_obligation_rejected_on_load(self, store):
        with pytest.raises(PolicyError):
            store.load_policy(policy_doc("p", condition="pressure > 3"))
        assert len(store) == 0

    def test_first_applicable(self, store):
        store.load_policy(policy_doc("first", "rainrate > 1"))
        store.load_policy(policy_doc("second", "rainrate > 2", subjects={}))
        assert store.evaluate(lta_request()).policy_id == "first"
        store.remove_policy("first")
        assert store.evaluate(lta_request()).policy_id == "second"

    def test_deterministic(self, store):
        for i in range(5):
            store.load_policy(policy_doc(f"p{i}", f"rainrate > {i}"))
        decisions = {store.evaluate(lta_request()) for _ in range(20)}
        assert len(decisions) == 1

    def test_replacement_notifies(self, store):
        seen = []
        store.add_listener(lambda pid, change: seen.append((pid, change)))
        store.load_policy(policy_doc("p", "rainrate > 1"))
        store.load_policy(policy_doc("p", "rainrate > 2"))
        assert seen == [("p", "modified")]
        d = store.evaluate(lta_request())
        assert str(store.graph_for(d, "weather").filter.condition) == "rainrate > 2"
        assert store.remove_policy("p") and not store.remove_policy("p")
        assert seen[-1] == ("p", "removed")
        assert "p" not in store and store.get("p") is None

    def test_many_credentials_fall_back_to_scan(self, store):
        creds = {f"k{i}": str(i) for i in range(12)}
        store.load_policy(policy_doc("wide", subjects={"k3": "3", "k7": "7"}))
        assert store.evaluate(lta_request(**creds)).policy_id == "wide"

    def test_concurrent_load_and_evaluate(self, store):
        store.load_policy(LTA_POLICY)
        errors = []

        def writer():
            for i in range(200):
                store.load_policy(policy_doc(f"w{i % 10}", f"rainrate > {i}",
                                             subjects={"organisation": "NEA"}))

        def reader():
            for _ in range(500):
                d = store.evaluate(lta_request())
                if d.policy_id != "lta-weather":
                    errors.append(d)

        threads = [threading.Thread(target=writer)] + [threading.Thread(target=reader)
                                                       for _ in range(4)]
        for t in threads:
            t.start()
        for t in threads:
            t.join()
        assert not errors and len(store) == 11
