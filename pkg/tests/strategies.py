"""Hypothesis strategies and small helpers shared by the property tests."""
import itertools
from decimal import Decimal

import numpy as np
from hypothesis import strategies as st

from streamgate.predicate import (
    OPERATORS, And, Leaf, Not, Or, SimpleExpression, evaluate, leaves,
)
from streamgate.querygraph import FilterOp, MapOp, QueryGraph, Schema, WindowAggOp

ATTRS = ("a", "b", "c")


def simple(attrs=ATTRS, lo=0, hi=10):
    return st.builds(
        lambda a, op, v: SimpleExpression(a, op, v),
        st.sampled_from(attrs), st.sampled_from(OPERATORS), st.integers(lo, hi))


def predicates(max_leaves=6, attrs=ATTRS, allow_not=True):
    leaf = simple(attrs).map(Leaf)

    def extend(children):
        ops = [st.builds(And, children, children), st.builds(Or, children, children)]
        if allow_not:
            ops.append(children.map(Not))
        return st.one_of(*ops)

    return st.recursive(leaf, extend, max_leaves=max_leaves).filter(
        lambda p: len(list(leaves(p))) <= max_leaves)


def conjunctions(max_leaves=4, attrs=ATTRS):
    return st.lists(simple(attrs).map(Leaf), min_size=1, max_size=max_leaves).map(
        lambda ls: ls[0] if len(ls) == 1 else _fold(And, ls))


def _fold(cls, items):
    out = items[0]
    for x in items[1:]:
        out = cls(out, x)
    return out


def induced_grid(*preds):
    """Every assignment over literal values and their neighbours (+-1, midpoints)."""
    values = {}
    for p in preds:
        for e in leaves(p):
            values.setdefault(e.attribute, set())
            if e.numeric:
                values[e.attribute] |= {e.literal - 1, e.literal, e.literal + 1,
                                        e.literal + Decimal("0.5")}
            else:
                values[e.attribute] |= {e.literal, e.literal + "_x"}
    names = sorted(values)
    for combo in itertools.product(*(sorted(values[n], key=str) for n in names)):
        yield dict(zip(names, combo))


def equivalent(p, q, extra=()) -> bool:
    return all(evaluate(p, row) == evaluate(q, row) for row in induced_grid(p, q, *extra))


# schema with numeric attributes only, handy for random execution checks
NUMERIC = Schema("s", [("ts", "timestamp"), ("a", "int"), ("b", "int"), ("c", "double")])


def random_rows(rng: np.random.Generator, n: int, schema: Schema = NUMERIC,
                ts_step_max: int = 3) -> list[tuple]:
    """Rows with non-decreasing timestamps and small integer-valued fields."""
    rows, ts = [], 0
    for _ in range(n):
        ts += int(rng.integers(0, ts_step_max + 1))
        row = []
        for name, ftype in schema.fields:
            if ftype == "timestamp":
                row.append(ts)
            elif ftype == "int":
                row.append(int(rng.integers(0, 11)))
            elif ftype == "double":
                row.append(float(rng.integers(0, 11)))
            else:
                row.append(f"s{int(rng.integers(0, 3))}")
        rows.append(tuple(row))
    return rows


AGG_FUNCS = ("avg", "max", "min", "sum", "count", "lastval", "firstval")


@st.composite
def windows(draw, attrs=("a", "b", "c"), wtypes=("tuple", "time")):
    chosen = draw(st.lists(st.sampled_from(attrs), min_size=1, max_size=len(attrs), unique=True))
    aggs = {a: draw(st.sampled_from(AGG_FUNCS)) for a in chosen}
    size = draw(st.integers(1, 8))
    step = draw(st.integers(1, size))
    return WindowAggOp(draw(st.sampled_from(wtypes)), size, step, aggs)


@st.composite
def graphs(draw, schema: Schema = NUMERIC, max_leaves: int = 4, wtypes=("tuple", "time")):
    """Valid graphs over the numeric test schema (filters on a, b, c)."""
    f = draw(st.none() | predicates(max_leaves=max_leaves).map(FilterOp))
    m = draw(st.none() | st.sets(st.sampled_from(("ts", "a", "b", "c")), min_size=1).map(MapOp))
    w = None
    if draw(st.booleans()):
        pool = [x for x in ("a", "b", "c") if m is None or x in m.attributes]
        if pool:
            w = draw(windows(tuple(pool), wtypes))
    return QueryGraph(schema.stream_name, f, m, w)
