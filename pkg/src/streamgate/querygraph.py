"""Query-graph IR: schemas and the filter -> map -> window pipeline."""
from __future__ import annotations

from dataclasses import dataclass
from decimal import Decimal
from typing import Iterable

from .predicate import Predicate, SimpleExpression, leaves, map_leaves, parse_predicate

FIELD_TYPES = ("timestamp", "double", "int", "string")
AGG_FUNCTIONS = ("avg", "max", "min", "count", "sum", "lastval", "firstval")
WINDOW_TYPES = ("tuple", "time")
NUMERIC_TYPES = ("timestamp", "double", "int")


class GraphError(ValueError):
    pass


class UnknownAttributeError(GraphError):
    pass


class TypeMismatchError(GraphError):
    pass


@dataclass(frozen=True)
class Schema:
    stream_name: str
    fields: tuple

    def __post_init__(self):
        fields = tuple((str(n), str(t)) for n, t in self.fields)
        object.__setattr__(self, "fields", fields)
        if not self.stream_name:
            raise GraphError("schema needs a stream name")
        if not fields:
            raise GraphError(f"schema {self.stream_name!r} has no fields")
        names = [n for n, _ in fields]
        if len(set(names)) != len(names):
            raise GraphError(f"duplicate field names in {self.stream_name!r}")
        for name, ftype in fields:
            if ftype not in FIELD_TYPES:
                raise GraphError(f"field {name!r} has unknown type {ftype!r}")

    @property
    def names(self) -> tuple:
        return tuple(n for n, _ in self.fields)

    def index(self, name: str) -> int:
        return self.names.index(name)

    def type_of(self, name: str) -> str:
        return dict(self.fields)[name]

    def resolve(self, name: str) -> str:
        """Map ``name`` to the declared field name, ignoring case."""
        if name in self.names:
            return name
        matches = [n for n in self.names if n.lower() == name.lower()]
        if len(matches) != 1:
            raise UnknownAttributeError(
                f"unknown attribute {name!r} in stream {self.stream_name!r}")
        return matches[0]

    def __str__(self) -> str:
        body = ", ".join(f"{n} {t}" for n, t in self.fields)
        return f"{self.stream_name} ({body})"


@dataclass(frozen=True)
class FilterOp:
    condition: Predicate

    @classmethod
    def parse(cls, text: str, origin: str = "policy") -> "FilterOp":
        return cls(parse_predicate(text, origin))


@dataclass(frozen=True)
class MapOp:
    attributes: frozenset

    def __post_init__(self):
        object.__setattr__(self, "attributes", frozenset(self.attributes))
        if not self.attributes:
            raise GraphError("map needs at least one attribute")


@dataclass(frozen=True)
class WindowAggOp:
    window_type: str
    size: int
    step: int
    aggs: tuple  # sorted (attribute, function) pairs

    def __post_init__(self):
        if isinstance(self.aggs, dict):
            aggs = tuple(sorted(self.aggs.items()))
        else:
            aggs = tuple(sorted((str(a), str(f).lower()) for a, f in self.aggs))
        object.__setattr__(self, "aggs", aggs)
        if self.window_type not in WINDOW_TYPES:
            raise GraphError(f"unknown window type {self.window_type!r}")
        for value, what in ((self.size, "size"), (self.step, "step")):
            if isinstance(value, bool) or not isinstance(value, int) or value <= 0:
                raise GraphError(f"window {what} must be a positive integer, got {value!r}")
        if self.step > self.size:
            raise GraphError(f"window step {self.step} exceeds size {self.size}")
        if not aggs:
            raise GraphError("window aggregation needs at least one aggregate")
        attrs = [a for a, _ in aggs]
        if len(set(attrs)) != len(attrs):
            raise GraphError("at most one aggregate function per attribute")
        for _, func in aggs:
            if func not in AGG_FUNCTIONS:
                raise GraphError(f"unknown aggregate function {func!r}")

    @property
    def functions(self) -> dict:
        return dict(self.aggs)

    def output_names(self) -> list[str]:
        return [f"{func}{attr}" for attr, func in self.aggs]


@dataclass(frozen=True)
class QueryGraph:
    """Linear pipeline applied to ``source``; each operator kind is optional."""

    source: str
    filter: FilterOp | None = None
    map: MapOp | None = None
    window: WindowAggOp | None = None

    @classmethod
    def from_operators(cls, source: str, operators: Iterable) -> "QueryGraph":
        slots = {FilterOp: "filter", MapOp: "map", WindowAggOp: "window"}
        kwargs: dict = {}
        for op in operators:
            slot = slots.get(type(op))
            if slot is None:
                raise GraphError(f"unsupported operator {op!r}")
            if slot in kwargs:
                raise GraphError(f"graph may contain at most one {slot} operator")
            kwargs[slot] = op
        return cls(source, **kwargs)

    @property
    def operators(self) -> list:
        return [op for op in (self.filter, self.map, self.window) if op is not None]

    @property
    def is_identity(self) -> bool:
        return not self.operators

    def canonical_text(self) -> str:
        parts = [self.source]
        if self.filter is not None:
            parts.append(f"FILTER {self.filter.condition}")
        if self.map is not None:
            parts.append("MAP " + ",".join(sorted(self.map.attributes)))
        if self.window is not None:
            w = self.window
            aggs = ",".join(f"{f}({a})" for a, f in w.aggs)
            parts.append(f"WINDOW {w.window_type} {w.size}/{w.step} {aggs}")
        return " | ".join(parts)

    def __str__(self) -> str:
        return self.canonical_text()


def _check_filter(op: FilterOp, schema: Schema) -> None:
    for e in leaves(op.condition):
        if e.attribute not in schema.names:
            raise UnknownAttributeError(
                f"filter references unknown attribute {e.attribute!r}")
        ftype = schema.type_of(e.attribute)
        if ftype == "string":
            if e.numeric:
                raise TypeMismatchError(f"{e}: string field compared with a number")
        elif not e.numeric:
            raise TypeMismatchError(f"{e}: {ftype} field compared with a string")


def _agg_type(func: str, ftype: str) -> str:
    if func == "count":
        return "int"
    if func == "avg":
        return "double"
    return ftype


def output_schema_of(op, schema: Schema) -> Schema:
    """Schema produced by applying ``op`` to tuples of ``schema``."""
    if isinstance(op, FilterOp):
        _check_filter(op, schema)
        return schema
    if isinstance(op, MapOp):
        for attr in op.attributes:
            if attr not in schema.names:
                raise UnknownAttributeError(f"map references unknown attribute {attr!r}")
        return Schema(schema.stream_name,
                      [(n, t) for n, t in schema.fields if n in op.attributes])
    if isinstance(op, WindowAggOp):
        out = []
        for attr, func in window_layout(op, schema):
            if attr not in schema.names:
                raise UnknownAttributeError(
                    f"window aggregates unknown attribute {attr!r}")
            ftype = schema.type_of(attr)
            if func in ("avg", "sum") and ftype not in ("double", "int"):
                raise TypeMismatchError(f"{func} needs a numeric field, {attr!r} is {ftype}")
            out.append((f"{func}{attr}", _agg_type(func, ftype)))
        return Schema(schema.stream_name, out)
    raise GraphError(f"unsupported operator {op!r}")


def validate_graph(g: QueryGraph, schema: Schema) -> Schema:
    """Check ``g`` against ``schema`` and return the output schema."""
    if g.source != schema.stream_name:
        raise GraphError(f"graph reads {g.source!r} but schema is {schema.stream_name!r}")
    if g.window is not None and g.window.window_type == "time" and timestamp_field(schema) is None:
        raise TypeMismatchError(f"time window needs a timestamp field in {schema.stream_name!r}")
    current = schema
    for op in g.operators:
        current = output_schema_of(op, current)
    return current


def window_layout(op: WindowAggOp, schema: Schema) -> list:
    """Aggregates of ``op`` in input-field order; unknown attributes last."""
    order = {name: i for i, name in enumerate(schema.names)}
    return sorted(op.aggs, key=lambda pair: (order.get(pair[0], len(order)), pair[0]))


def timestamp_field(schema: Schema) -> str | None:
    for name, ftype in schema.fields:
        if ftype == "timestamp":
            return name
    return None


def resolve_predicate(p: Predicate, schema: Schema) -> Predicate:
    """Rename attributes in ``p`` to the schema's spelling."""
    return map_leaves(p, lambda e: SimpleExpression(
        schema.resolve(e.attribute), e.op, e.literal, e.origin))


def coerce_value(value, ftype: str):
    """Validate one tuple value against a field type; returns the stored value."""
    if ftype == "string":
        if not isinstance(value, str):
            raise TypeMismatchError(f"expected string, got {value!r}")
        return value
    if isinstance(value, bool) or not isinstance(value, (int, float, Decimal)):
        raise TypeMismatchError(f"expected {ftype}, got {value!r}")
    if ftype == "int":
        if isinstance(value, float) and not value.is_integer():
            raise TypeMismatchError(f"expected int, got {value!r}")
        return int(value)
    if ftype == "double":
        return float(value)
    return value


WEATHER = Schema("weather", [
    ("samplingtime", "timestamp"),
    ("temperature", "double"),
    ("humidity", "double"),
    ("solarradiation", "double"),
    ("rainrate", "double"),
    ("windspeed", "double"),
    ("winddirection", "int"),
    ("barometer", "double"),
])

GPS = Schema("gps", [
    ("fixtime", "timestamp"),
    ("deviceid", "string"),
    ("latitude", "double"),
    ("longitude", "double"),
    ("speed", "double"),
    ("accuracy", "int"),
])
