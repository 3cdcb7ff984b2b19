"""Policies, access requests and the decision point.

Policies and user queries are XML documents.  A policy's obligations
carry the fine-grained constraints (filter condition, visible attributes,
window shape) and compile to a :class:`QueryGraph`.
"""
from __future__ import annotations

import itertools
import re
import threading
import xml.etree.ElementTree as ET
from dataclasses import dataclass, field
from typing import Callable, Mapping

from .predicate import PredicateSyntaxError, SimpleExpression, map_leaves, parse_predicate
from .querygraph import (
    FilterOp, GraphError, MapOp, QueryGraph, Schema, WindowAggOp, resolve_predicate,
    validate_graph,
)

FILTER = "exacml:obligation:stream-filter"
MAP = "exacml:obligation:stream-map"
WINDOW = "exacml:obligation:stream-window"

_OBLIGATION_ALIASES = {
    "stream-filter": FILTER, "stream-filtering": FILTER,
    "stream-map": MAP, "stream-mapping": MAP,
    "stream-window": WINDOW, "stream-window-aggregation": WINDOW,
}

CONDITION_ID = "stream-filter-condition-id"
MAP_ATTR_ID = "stream-map-attribute-id"
WINDOW_TYPE_ID = "stream-window-type-id"
WINDOW_SIZE_ID = "stream-window-size-id"
WINDOW_STEP_ID = "stream-window-step-id"
WINDOW_ATTR_ID = "stream-window-attr-id"

XSD = "http://www.w3.org/2001/XMLSchema#"

_FUNCTION_ALIASES = {
    "lastvalue": "lastval", "firstvalue": "firstval", "average": "avg",
    "maximum": "max", "minimum": "min",
}


class PolicyError(ValueError):
    pass


class UnknownStreamError(PolicyError):
    pass


def _suffix(identifier: str) -> str:
    return identifier.rsplit(":", 1)[-1].strip()


def normalize_obligation_id(identifier: str) -> str:
    try:
        return _OBLIGATION_ALIASES[_suffix(identifier).lower()]
    except KeyError:
        raise PolicyError(f"unknown obligation id {identifier!r}") from None


def normalize_function(name: str) -> str:
    name = name.strip().lower()
    return _FUNCTION_ALIASES.get(name, name)


@dataclass(frozen=True)
class AttributeAssignment:
    attribute_id: str
    data_type: str
    value: str

    def __post_init__(self):
        dtype = self.data_type.rsplit("#", 1)[-1].lower()
        if dtype not in ("string", "integer"):
            raise PolicyError(f"unsupported data type {self.data_type!r}")
        object.__setattr__(self, "data_type", dtype)
        object.__setattr__(self, "value", self.value.strip())
        if dtype == "integer" and not re.fullmatch(r"[-+]?\d+", self.value):
            raise PolicyError(f"{self.attribute_id}: {self.value!r} is not an integer")

    @property
    def kind(self) -> str:
        return _suffix(self.attribute_id)


@dataclass(frozen=True)
class Obligation:
    obligation_id: str
    assignments: tuple
    fulfill_on: str = "Permit"

    def __post_init__(self):
        object.__setattr__(self, "obligation_id", normalize_obligation_id(self.obligation_id))
        object.__setattr__(self, "assignments", tuple(self.assignments))
        if self.fulfill_on != "Permit":
            raise PolicyError(f"obligations are fulfilled on Permit, not {self.fulfill_on!r}")
        kinds = [a.kind for a in self.assignments]
        if self.obligation_id == FILTER:
            if kinds != [CONDITION_ID]:
                raise PolicyError("filter obligation needs exactly one condition")
        elif self.obligation_id == MAP:
            if not kinds or set(kinds) != {MAP_ATTR_ID}:
                raise PolicyError("map obligation needs one or more attribute assignments")
        else:
            for required in (WINDOW_TYPE_ID, WINDOW_SIZE_ID, WINDOW_STEP_ID):
                if kinds.count(required) != 1:
                    raise PolicyError(f"window obligation needs exactly one {required}")
            if WINDOW_ATTR_ID not in kinds:
                raise PolicyError("window obligation needs at least one attribute")
            if set(kinds) - {WINDOW_TYPE_ID, WINDOW_SIZE_ID, WINDOW_STEP_ID, WINDOW_ATTR_ID}:
                raise PolicyError("unexpected assignment in window obligation")

    def values(self, kind: str) -> list[str]:
        return [a.value for a in self.assignments if a.kind == kind]


@dataclass(frozen=True)
class Policy:
    policy_id: str
    resource: str
    action: str
    subjects: tuple = ()  # sorted (attribute, value) pairs
    effect: str = "Permit"
    obligations: tuple = ()

    def __post_init__(self):
        subjects = self.subjects.items() if isinstance(self.subjects, Mapping) else self.subjects
        object.__setattr__(self, "subjects", tuple(sorted((str(k), str(v)) for k, v in subjects)))
        object.__setattr__(self, "obligations", tuple(self.obligations))
        if self.effect not in ("Permit", "Deny"):
            raise PolicyError(f"effect must be Permit or Deny, got {self.effect!r}")
        if not self.policy_id or not self.resource:
            raise PolicyError("policy needs an id and a resource")

    def matches(self, req: "AccessRequest") -> bool:
        if req.resource != self.resource or req.action != self.action:
            return False
        return all(req.credentials.get(k) == v for k, v in self.subjects)


@dataclass(frozen=True)
class AccessRequest:
    credentials: Mapping[str, str]
    resource: str
    action: str = "read"
    user_query: str | None = None

    def __post_init__(self):
        if not self.resource:
            raise PolicyError("request needs a resource")
        object.__setattr__(self, "credentials", dict(self.credentials))

    def __hash__(self):
        return hash((fingerprint(self.credentials), self.resource, self.action, self.user_query))


@dataclass(frozen=True)
class Decision:
    verdict: str
    obligations: tuple = ()
    policy_id: str | None = None

    def __post_init__(self):
        if self.verdict not in ("Permit", "Deny", "NotApplicable"):
            raise ValueError(f"bad verdict {self.verdict!r}")
        if self.verdict != "Permit" and self.obligations:
            raise ValueError("only Permit carries obligations")


def fingerprint(credentials: Mapping[str, str]) -> str:
    """Canonical text identifying a principal by its subject attributes."""
    def esc(s: str) -> str:
        return s.replace("%", "%25").replace("&", "%26").replace("=", "%3D")
    return "&".join(f"{esc(k)}={esc(v)}" for k, v in sorted(credentials.items()))


# ------------------------------------------------------------------ XML

def _parse_xml(doc: str) -> ET.Element:
    try:
        return ET.fromstring(doc)
    except ET.ParseError as exc:
        raise PolicyError(f"malformed document: {exc}") from None


def _attribute_pairs(parent: ET.Element | None) -> list[tuple[str, str]]:
    if parent is None:
        return []
    return [(el.get("AttributeId", ""), (el.text or "").strip())
            for el in parent.iter("Attribute")]


def parse_obligations(root: ET.Element | None) -> list[Obligation]:
    if root is None:
        return []
    out = []
    for ob in root.findall("Obligation"):
        assignments = [
            AttributeAssignment(a.get("AttributeId", ""), a.get("DataType", XSD + "string"),
                                a.text or "")
            for a in ob.findall("AttributeAssignment")
        ]
        out.append(Obligation(ob.get("ObligationId", ""), assignments,
                              ob.get("FulfillOn", "Permit")))
    return out


def parse_policy(doc: str) -> Policy:
    root = _parse_xml(doc)
    if root.tag != "Policy":
        raise PolicyError(f"expected <Policy>, found <{root.tag}>")
    target = root.find("Target")
    if target is None:
        raise PolicyError("policy has no <Target>")
    resources = [v for _, v in _attribute_pairs(target.find("Resources"))]
    actions = [v for _, v in _attribute_pairs(target.find("Actions"))]
    if len(resources) != 1 or len(actions) != 1:
        raise PolicyError("target needs exactly one resource and one action")
    return Policy(
        policy_id=root.get("PolicyId", ""),
        resource=resources[0],
        action=actions[0],
        subjects=_attribute_pairs(target.find("Subjects")),
        effect=root.get("Effect", "Permit"),
        obligations=parse_obligations(root.find("Obligations")),
    )


def _obligations_element(parent: ET.Element, obligations) -> None:
    block = ET.SubElement(parent, "Obligations")
    for ob in obligations:
        el = ET.SubElement(block, "Obligation",
                           ObligationId=ob.obligation_id, FulfillOn=ob.fulfill_on)
        for a in ob.assignments:
            sub = ET.SubElement(el, "AttributeAssignment",
                                AttributeId=a.attribute_id, DataType=XSD + a.data_type)
            sub.text = a.value


def policy_to_xml(policy: Policy) -> str:
    root = ET.Element("Policy", PolicyId=policy.policy_id, Effect=policy.effect)
    target = ET.SubElement(root, "Target")
    for tag, pairs in (("Subjects", policy.subjects),
                       ("Resources", [("resource-id", policy.resource)]),
                       ("Actions", [("action-id", policy.action)])):
        group = ET.SubElement(target, tag)
        for attr_id, value in pairs:
            ET.SubElement(group, "Attribute", AttributeId=attr_id).text = value
    _obligations_element(root, policy.obligations)
    ET.indent(root)
    return ET.tostring(root, encoding="unicode")


# ------------------------------------------------------------ compilation

def _assignment(kind: str, value, dtype: str = "string") -> AttributeAssignment:
    return AttributeAssignment(f"exacml:obligation:{kind}", dtype, str(value))


def obligations_to_graph(obls, schema: Schema) -> QueryGraph:
    """Compile Permit obligations into a query graph over ``schema``."""
    ops = []
    try:
        for ob in obls:
            if ob.obligation_id == FILTER:
                (text,) = ob.values(CONDITION_ID)
                pred = resolve_predicate(parse_predicate(text, "policy"), schema)
                ops.append(FilterOp(pred))
            elif ob.obligation_id == MAP:
                ops.append(MapOp(schema.resolve(v) for v in ob.values(MAP_ATTR_ID)))
            else:
                aggs = []
                for item in ob.values(WINDOW_ATTR_ID):
                    attr, sep, func = item.rpartition(":")
                    if not sep:
                        raise PolicyError(f"window attribute {item!r} is not attr:function")
                    aggs.append((schema.resolve(attr.strip()), normalize_function(func)))
                ops.append(WindowAggOp(
                    ob.values(WINDOW_TYPE_ID)[0].lower(),
                    int(ob.values(WINDOW_SIZE_ID)[0]),
                    int(ob.values(WINDOW_STEP_ID)[0]),
                    tuple(aggs)))
        graph = QueryGraph.from_operators(schema.stream_name, ops)
        validate_graph(graph, schema)
    except (GraphError, PredicateSyntaxError) as exc:
        raise PolicyError(f"invalid obligation: {exc}") from exc
    return graph


def graph_to_obligations(graph: QueryGraph) -> list[Obligation]:
    out = []
    if graph.filter is not None:
        out.append(Obligation(FILTER, [_assignment(CONDITION_ID, graph.filter.condition)]))
    if graph.map is not None:
        out.append(Obligation(MAP, [_assignment(MAP_ATTR_ID, a)
                                    for a in sorted(graph.map.attributes)]))
    if graph.window is not None:
        w = graph.window
        out.append(Obligation(WINDOW, [
            _assignment(WINDOW_TYPE_ID, w.window_type),
            _assignment(WINDOW_SIZE_ID, w.size, "integer"),
            _assignment(WINDOW_STEP_ID, w.step, "integer"),
            *(_assignment(WINDOW_ATTR_ID, f"{a}:{f}") for a, f in w.aggs),
        ]))
    return out


_UNCLOSED = re.compile(r"<(WindowType|WindowSize|WindowStep)>([^<]*)<\1>")
_CONDITION = re.compile(r"(<FilterCondition>)(.*?)(</FilterCondition>)", re.S)
_BARE_AMP = re.compile(r"&(?!(?:lt|gt|amp|quot|apos|#\d+|#x[0-9a-fA-F]+);)")
_AGG_CALL = re.compile(r"\s*([A-Za-z_]\w*)\s*\(\s*([A-Za-z_]\w*)\s*\)\s*\Z")


def _repair_user_query(doc: str) -> str:
    # Hand-written queries often leave comparison operators unescaped and
    # repeat the opening tag instead of closing it.
    doc = _UNCLOSED.sub(r"<\1>\2</\1>", doc)

    def escape(m):
        body = _BARE_AMP.sub("&amp;", m.group(2)).replace("<", "&lt;")
        return m.group(1) + body + m.group(3)
    return _CONDITION.sub(escape, doc)


def parse_user_query(doc: str, schema: Schema | None = None) -> QueryGraph:
    """Parse a ``<UserQuery>`` document.

    Attribute names resolve case-insensitively against ``schema``; without
    a schema they are lower-cased and left unvalidated.
    """
    root = _parse_xml(_repair_user_query(doc))
    if root.tag != "UserQuery":
        raise PolicyError(f"expected <UserQuery>, found <{root.tag}>")
    stream = root.find("Stream")
    if stream is None or not stream.get("name"):
        raise PolicyError("user query needs <Stream name=...>")
    source = stream.get("name")
    if schema is not None and source != schema.stream_name:
        raise PolicyError(f"query reads {source!r}, expected {schema.stream_name!r}")

    def resolve(name: str) -> str:
        return schema.resolve(name) if schema is not None else name.lower()

    ops = []
    try:
        f = root.find("Filter")
        if f is not None:
            cond = f.findtext("FilterCondition", "").strip()
            if not cond:
                raise PolicyError("empty <FilterCondition>")
            pred = parse_predicate(cond, "user")
            if schema is not None:
                pred = resolve_predicate(pred, schema)
            else:
                pred = map_leaves(pred, lambda e: SimpleExpression(
                    e.attribute.lower(), e.op, e.literal, e.origin))
            ops.append(FilterOp(pred))
        m = root.find("Map")
        if m is not None:
            ops.append(MapOp(resolve((a.text or "").strip()) for a in m.findall("Attribute")))
        a = root.find("Aggregation")
        if a is not None:
            aggs = []
            for item in a.findall("Attribute"):
                call = _AGG_CALL.match(item.text or "")
                if call is None:
                    raise PolicyError(f"aggregate {item.text!r} is not func(attribute)")
                aggs.append((resolve(call.group(2)), normalize_function(call.group(1))))
            try:
                size = int(a.findtext("WindowSize", "").strip())
                step = int(a.findtext("WindowStep", "").strip())
            except ValueError:
                raise PolicyError("window size and step must be integers") from None
            wtype = a.findtext("WindowType", "tuple").strip().lower()
            ops.append(WindowAggOp(wtype, size, step, tuple(aggs)))
        graph = QueryGraph.from_operators(source, ops)
        if schema is not None:
            validate_graph(graph, schema)
    except (GraphError, PredicateSyntaxError) as exc:
        raise PolicyError(f"invalid user query: {exc}") from exc
    return graph


def user_query_to_xml(graph: QueryGraph) -> str:
    root = ET.Element("UserQuery")
    ET.SubElement(root, "Stream", name=graph.source)
    if graph.filter is not None:
        f = ET.SubElement(root, "Filter")
        ET.SubElement(f, "FilterCondition").text = str(graph.filter.condition)
    if graph.map is not None:
        m = ET.SubElement(root, "Map")
        for attr in sorted(graph.map.attributes):
            ET.SubElement(m, "Attribute").text = attr
    if graph.window is not None:
        w = graph.window
        a = ET.SubElement(root, "Aggregation")
        ET.SubElement(a, "WindowType").text = w.window_type
        ET.SubElement(a, "WindowSize").text = str(w.size)
        ET.SubElement(a, "WindowStep").text = str(w.step)
        for attr, func in w.aggs:
            ET.SubElement(a, "Attribute").text = f"{func}({attr})"
    ET.indent(root)
    return ET.tostring(root, encoding="unicode")


def user_query_key(doc: str | None) -> str:
    """Schema-free canonical form of a user query, used in cache keys."""
    if doc is None:
        return ""
    return parse_user_query(doc).canonical_text()


def request_to_xml(req: AccessRequest) -> str:
    root = ET.Element("Request")
    subject = ET.SubElement(root, "Subject")
    for k, v in sorted(req.credentials.items()):
        ET.SubElement(subject, "Attribute", AttributeId=k).text = v
    ET.SubElement(root, "Resource").text = req.resource
    ET.SubElement(root, "Action").text = req.action
    if req.user_query is not None:
        root.append(_parse_xml(_repair_user_query(req.user_query)))
    ET.indent(root)
    return ET.tostring(root, encoding="unicode")


def parse_request(doc: str | ET.Element) -> AccessRequest:
    root = doc if isinstance(doc, ET.Element) else _parse_xml(doc)
    if root.tag != "Request":
        raise PolicyError(f"expected <Request>, found <{root.tag}>")
    query = root.find("UserQuery")
    return AccessRequest(
        credentials=dict(_attribute_pairs(root.find("Subject"))),
        resource=root.findtext("Resource", "").strip(),
        action=root.findtext("Action", "read").strip(),
        user_query=ET.tostring(query, encoding="unicode") if query is not None else None,
    )


# ------------------------------------------------------------ policy store

_MAX_SUBSET_ATTRS = 10


@dataclass
class _Snapshot:
    policies: dict = field(default_factory=dict)   # id -> (seq, Policy)
    index: dict = field(default_factory=dict)      # (resource, action, subjects) -> {id: seq}


class PolicyStore:
    """Decision point over the loaded policies (first-applicable).

    Readers work on an immutable snapshot, so ``evaluate`` never sees a
    half-applied update.  ``schemas`` maps stream names to schemas and is
    consulted when policies are loaded.
    """

    def __init__(self, schemas: Mapping[str, Schema] | Callable[[str], Schema | None]):
        self._schemas = schemas
        self._snapshot = _Snapshot()
        self._write_lock = threading.Lock()
        self._seq = itertools.count()
        self._listeners: list[Callable[[str, str], object]] = []

    def schema(self, stream: str) -> Schema | None:
        if callable(self._schemas):
            return self._schemas(stream)
        return self._schemas.get(stream)

    def add_listener(self, fn: Callable[[str, str], object]) -> None:
        """Register ``fn(policy_id, change)``; change is 'removed' or 'modified'."""
        self._listeners.append(fn)

    def __len__(self) -> int:
        return len(self._snapshot.policies)

    def __contains__(self, policy_id: str) -> bool:
        return policy_id in self._snapshot.policies

    def get(self, policy_id: str) -> Policy | None:
        entry = self._snapshot.policies.get(policy_id)
        return entry[1] if entry else None

    def load_policy(self, doc: str | Policy) -> str:
        policy = parse_policy(doc) if isinstance(doc, str) else doc
        schema = self.schema(policy.resource)
        if schema is None:
            raise UnknownStreamError(f"unknown stream {policy.resource!r}")
        obligations_to_graph(policy.obligations, schema)
        with self._write_lock:
            old = self._snapshot
            snap = _Snapshot(dict(old.policies), dict(old.index))
            replaced = policy.policy_id in snap.policies
            if replaced:
                self._unindex(snap, snap.policies[policy.policy_id][1])
            seq = next(self._seq)
            snap.policies[policy.policy_id] = (seq, policy)
            key = (policy.resource, policy.action, policy.subjects)
            bucket = dict(snap.index.get(key, {}))
            bucket[policy.policy_id] = seq
            snap.index[key] = bucket
            self._snapshot = snap
        if replaced:
            self._notify(policy.policy_id, "modified")
        return policy.policy_id

    @staticmethod
    def _unindex(snap: _Snapshot, policy: Policy) -> None:
        key = (policy.resource, policy.action, policy.subjects)
        bucket = dict(snap.index[key])
        del bucket[policy.policy_id]
        if bucket:
            snap.index[key] = bucket
        else:
            del snap.index[key]

    def remove_policy(self, policy_id: str) -> bool:
        with self._write_lock:
            old = self._snapshot
            if policy_id not in old.policies:
                return False
            snap = _Snapshot(dict(old.policies), dict(old.index))
            _, policy = snap.policies.pop(policy_id)
            self._unindex(snap, policy)
            self._snapshot = snap
        self._notify(policy_id, "removed")
        return True

    def _notify(self, policy_id: str, change: str) -> None:
        for fn in list(self._listeners):
            fn(policy_id, change)

    def evaluate(self, req: AccessRequest) -> Decision:
        snap = self._snapshot
        best = None
        items = sorted(req.credentials.items())
        if len(items) <= _MAX_SUBSET_ATTRS:
            for r in range(len(items) + 1):
                for subset in itertools.combinations(items, r):
                    bucket = snap.index.get((req.resource, req.action, subset))
                    if bucket:
                        # buckets keep insertion (= sequence) order
                        pid, seq = next(iter(bucket.items()))
                        if best is None or seq < best[0]:
                            best = (seq, pid)
        else:
            for pid, (seq, policy) in snap.policies.items():
                if policy.matches(req) and (best is None or seq < best[0]):
                    best = (seq, pid)
        if best is None:
            return Decision("NotApplicable")
        policy = snap.policies[best[1]][1]
        if policy.effect == "Deny":
            return Decision("Deny", policy_id=policy.policy_id)
        return Decision("Permit", policy.obligations, policy.policy_id)

    def graph_for(self, decision: Decision, stream: str) -> QueryGraph:
        schema = self.schema(stream)
        if schema is None:
            raise UnknownStreamError(f"unknown stream {stream!r}")
        return obligations_to_graph(decision.obligations, schema)
