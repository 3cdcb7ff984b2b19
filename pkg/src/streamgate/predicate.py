"""Boolean predicates over simple attribute comparisons.

A predicate is a tree of :class:`Leaf`, :class:`Not`, :class:`And` and
:class:`Or` nodes whose leaves are :class:`SimpleExpression` comparisons
``attribute op literal``.  Besides parsing and evaluation this module
implements the static empty/partial result analysis run when a policy
filter is merged with a user filter.
"""
from __future__ import annotations

import itertools
import logging
import re
from collections import defaultdict
from dataclasses import dataclass, field
from decimal import Decimal, InvalidOperation
from enum import Enum
from typing import Iterator, Mapping, Union

import numpy as np

log = logging.getLogger(__name__)

OPERATORS = ("<", ">", "<=", ">=", "=", "!=")
ORDERING = frozenset({"<", ">", "<=", ">="})
ORIGINS = ("policy", "user")
DEFAULT_DNF_CAP = 4096

NEGATED_OP = {">": "<=", "<": ">=", ">=": "<", "<=": ">", "=": "!=", "!=": "="}

_IDENT = re.compile(r"[A-Za-z_][A-Za-z0-9_]*\Z")
_INF = Decimal("Infinity")

Literal = Union[Decimal, str]


class PredicateSyntaxError(ValueError):
    def __init__(self, message: str, position: int):
        super().__init__(f"{message} at position {position}")
        self.position = position


class DnfCapacityError(RuntimeError):
    """DNF expansion would exceed the configured number of disjuncts."""


class Verdict(str, Enum):
    NR = "NR"
    PR = "PR"
    NONE = "None"

    def __str__(self) -> str:
        return self.value


def _is_number(value) -> bool:
    return isinstance(value, (int, float, Decimal)) and not isinstance(value, bool)


@dataclass(frozen=True)
class SimpleExpression:
    attribute: str
    op: str
    literal: Literal
    origin: str = field(default="policy", compare=False)

    def __post_init__(self):
        if not isinstance(self.attribute, str) or not _IDENT.match(self.attribute):
            raise ValueError(f"invalid attribute name {self.attribute!r}")
        if self.op not in OPERATORS:
            raise ValueError(f"unknown operator {self.op!r}")
        if self.origin not in ORIGINS:
            raise ValueError(f"unknown origin {self.origin!r}")
        if isinstance(self.literal, str):
            if self.op in ORDERING:
                raise ValueError(
                    f"string literal {self.literal!r} used with ordering operator {self.op}")
        elif _is_number(self.literal):
            if not isinstance(self.literal, Decimal):
                object.__setattr__(self, "literal", Decimal(str(self.literal)))
        else:
            raise ValueError(f"unsupported literal {self.literal!r}")

    @property
    def numeric(self) -> bool:
        return isinstance(self.literal, Decimal)

    def negate(self) -> "SimpleExpression":
        return SimpleExpression(self.attribute, NEGATED_OP[self.op], self.literal, self.origin)

    def with_origin(self, origin: str) -> "SimpleExpression":
        return SimpleExpression(self.attribute, self.op, self.literal, origin)

    def holds(self, value) -> bool:
        # A comparison against a literal of the other type is false.
        if self.numeric:
            if not _is_number(value):
                return False
        elif not isinstance(value, str):
            return False
        lit = self.literal
        op = self.op
        if op == "<":
            return value < lit
        if op == ">":
            return value > lit
        if op == "<=":
            return value <= lit
        if op == ">=":
            return value >= lit
        if op == "=":
            return value == lit
        return value != lit

    def __str__(self) -> str:
        return f"{self.attribute} {self.op} {format_literal(self.literal)}"


def format_literal(literal: Literal) -> str:
    if isinstance(literal, Decimal):
        return format(literal, "f")
    escaped = literal.replace("\\", "\\\\").replace("'", "\\'")
    return f"'{escaped}'"


@dataclass(frozen=True)
class Leaf:
    expr: SimpleExpression

    def __str__(self) -> str:
        return str(self.expr)


@dataclass(frozen=True)
class Not:
    operand: "Predicate"

    def __str__(self) -> str:
        return f"NOT ({self.operand})"


@dataclass(frozen=True)
class And:
    left: "Predicate"
    right: "Predicate"

    def __str__(self) -> str:
        left = f"({self.left})" if isinstance(self.left, Or) else str(self.left)
        right = f"({self.right})" if isinstance(self.right, (And, Or)) else str(self.right)
        return f"{left} AND {right}"


@dataclass(frozen=True)
class Or:
    left: "Predicate"
    right: "Predicate"

    def __str__(self) -> str:
        right = f"({self.right})" if isinstance(self.right, Or) else str(self.right)
        return f"{self.left} OR {right}"


Predicate = Union[Leaf, Not, And, Or]


def leaf(attribute: str, op: str, literal, origin: str = "policy") -> Leaf:
    return Leaf(SimpleExpression(attribute, op, literal, origin))


def conjoin(*parts: Predicate) -> Predicate:
    """Left-nested AND of one or more predicates."""
    if not parts:
        raise ValueError("conjoin needs at least one operand")
    result = parts[0]
    for part in parts[1:]:
        result = And(result, part)
    return result


def disjoin(*parts: Predicate) -> Predicate:
    if not parts:
        raise ValueError("disjoin needs at least one operand")
    result = parts[0]
    for part in parts[1:]:
        result = Or(result, part)
    return result


def leaves(p: Predicate) -> Iterator[SimpleExpression]:
    if isinstance(p, Leaf):
        yield p.expr
    elif isinstance(p, Not):
        yield from leaves(p.operand)
    else:
        yield from leaves(p.left)
        yield from leaves(p.right)


def attributes(p: Predicate) -> set[str]:
    return {e.attribute for e in leaves(p)}


def map_leaves(p: Predicate, fn) -> Predicate:
    """Rebuild ``p`` with every SimpleExpression replaced by ``fn(expr)``."""
    if isinstance(p, Leaf):
        return Leaf(fn(p.expr))
    if isinstance(p, Not):
        return Not(map_leaves(p.operand, fn))
    return type(p)(map_leaves(p.left, fn), map_leaves(p.right, fn))


def with_origin(p: Predicate, origin: str) -> Predicate:
    return map_leaves(p, lambda e: e.with_origin(origin))


def evaluate(p: Predicate, row: Mapping[str, object]) -> bool:
    if isinstance(p, Leaf):
        return p.expr.holds(row[p.expr.attribute])
    if isinstance(p, Not):
        return not evaluate(p.operand, row)
    if isinstance(p, And):
        return evaluate(p.left, row) and evaluate(p.right, row)
    return evaluate(p.left, row) or evaluate(p.right, row)


# --------------------------------------------------------------------------
# parsing

_TOKEN = re.compile(r"""
    (?P<ws>\s+)
  | (?P<op><=|>=|!=|<>|<|>|=)
  | (?P<lparen>\()
  | (?P<rparen>\))
  | (?P<number>[-+]?(?:\d+\.?\d*|\.\d+)(?:[eE][-+]?\d+)?)
  | (?P<string>'(?:[^'\\]|\\.)*'|"(?:[^"\\]|\\.)*")
  | (?P<ident>[A-Za-z_][A-Za-z0-9_]*)
""", re.VERBOSE)

_KEYWORDS = {"and", "or", "not"}


def _tokenize(text: str) -> list[tuple[str, str, int]]:
    tokens = []
    pos = 0
    while pos < len(text):
        m = _TOKEN.match(text, pos)
        if m is None:
            raise PredicateSyntaxError(f"unexpected character {text[pos]!r}", pos)
        kind = m.lastgroup
        value = m.group()
        if kind == "ident" and value.lower() in _KEYWORDS:
            kind = value.lower()
        if kind != "ws":
            tokens.append((kind, value, pos))
        pos = m.end()
    tokens.append(("end", "", len(text)))
    return tokens


def _unquote(token: str) -> str:
    return re.sub(r"\\(.)", r"\1", token[1:-1])


class _Parser:
    def __init__(self, text: str, origin: str):
        self.tokens = _tokenize(text)
        self.i = 0
        self.origin = origin

    def peek(self):
        return self.tokens[self.i]

    def take(self, kind: str | None = None):
        tok = self.tokens[self.i]
        if kind is not None and tok[0] != kind:
            what = tok[1] or "end of input"
            raise PredicateSyntaxError(f"expected {kind}, found {what!r}", tok[2])
        self.i += 1
        return tok

    def expr(self) -> Predicate:
        node = self.term()
        while self.peek()[0] == "or":
            self.take()
            node = Or(node, self.term())
        return node

    def term(self) -> Predicate:
        node = self.factor()
        while self.peek()[0] == "and":
            self.take()
            node = And(node, self.factor())
        return node

    def factor(self) -> Predicate:
        kind, _, pos = self.peek()
        if kind == "not":
            self.take()
            return Not(self.factor())
        if kind == "lparen":
            self.take()
            node = self.expr()
            self.take("rparen")
            return node
        if kind == "ident":
            return self.comparison()
        what = self.peek()[1] or "end of input"
        raise PredicateSyntaxError(f"unexpected {what!r}", pos)

    def comparison(self) -> Predicate:
        _, name, _ = self.take("ident")
        _, op, _ = self.take("op")
        if op == "<>":
            op = "!="
        kind, value, pos = self.peek()
        if kind == "number":
            self.take()
            try:
                literal: Literal = Decimal(value)
            except InvalidOperation:
                raise PredicateSyntaxError(f"bad number {value!r}", pos) from None
        elif kind == "string":
            self.take()
            literal = _unquote(value)
            if op in ORDERING:
                raise PredicateSyntaxError(
                    f"string literal cannot be used with {op}", pos)
        else:
            raise PredicateSyntaxError(f"expected literal, found {value or 'end of input'!r}", pos)
        return Leaf(SimpleExpression(name, op, literal, self.origin))


def parse_predicate(text: str, origin: str = "policy") -> Predicate:
    """Parse ``text`` into a predicate tree.

    NOT binds tighter than AND, which binds tighter than OR.  Keywords are
    case-insensitive; literals are decimal numbers or quoted strings.
    """
    parser = _Parser(text, origin)
    node = parser.expr()
    kind, value, pos = parser.peek()
    if kind != "end":
        raise PredicateSyntaxError(f"unexpected {value!r}", pos)
    return node


# --------------------------------------------------------------------------
# normal forms

def eliminate_not(p: Predicate) -> Predicate:
    """Push negations into the leaves (De Morgan plus operator flipping)."""
    return _push_not(p, False)


def _push_not(p: Predicate, negated: bool) -> Predicate:
    if isinstance(p, Leaf):
        return Leaf(p.expr.negate()) if negated else p
    if isinstance(p, Not):
        return _push_not(p.operand, not negated)
    left = _push_not(p.left, negated)
    right = _push_not(p.right, negated)
    if isinstance(p, And):
        return Or(left, right) if negated else And(left, right)
    return And(left, right) if negated else Or(left, right)


Conjunct = tuple  # tuple[SimpleExpression, ...]


@dataclass(frozen=True)
class DnfPredicate:
    disjuncts: tuple  # tuple[Conjunct, ...]

    def __post_init__(self):
        if not self.disjuncts or not all(self.disjuncts):
            raise ValueError("DNF needs at least one non-empty conjunct")

    def evaluate(self, row: Mapping[str, object]) -> bool:
        return any(all(e.holds(row[e.attribute]) for e in conj) for conj in self.disjuncts)

    def to_predicate(self) -> Predicate:
        return disjoin(*(conjoin(*(Leaf(e) for e in conj)) for conj in self.disjuncts))

    def __str__(self) -> str:
        return " OR ".join(
            "(" + " AND ".join(str(e) for e in conj) + ")" for conj in self.disjuncts)


def _postfix(p: Predicate, out: list) -> list:
    if isinstance(p, Leaf):
        out.append(p.expr)
    elif isinstance(p, Not):
        raise ValueError("to_dnf expects a predicate without NOT; call eliminate_not first")
    else:
        _postfix(p.left, out)
        _postfix(p.right, out)
        out.append("AND" if isinstance(p, And) else "OR")
    return out


def to_dnf(p: Predicate, cap: int = DEFAULT_DNF_CAP) -> DnfPredicate:
    """Convert a NOT-free predicate to disjunctive normal form.

    The tree is flattened to postfix and evaluated on a stack whose
    entries are lists of conjuncts: OR concatenates, AND distributes.
    """
    stack: list[list[Conjunct]] = []
    for item in _postfix(p, []):
        if isinstance(item, SimpleExpression):
            stack.append([(item,)])
            continue
        right = stack.pop()
        left = stack.pop()
        if item == "OR":
            merged = left + right
        else:
            if len(left) * len(right) > cap:
                raise DnfCapacityError(
                    f"DNF would have {len(left) * len(right)} disjuncts (cap {cap})")
            merged = [r + l for l in left for r in right]
        if len(merged) > cap:
            raise DnfCapacityError(f"DNF would have {len(merged)} disjuncts (cap {cap})")
        stack.append(merged)
    (result,) = stack
    return DnfPredicate(tuple(result))


# --------------------------------------------------------------------------
# pairwise conflict checks

def _interval(op: str, v: Decimal) -> list[tuple]:
    if op == ">":
        return [(v, False, _INF, False)]
    if op == ">=":
        return [(v, True, _INF, False)]
    if op == "<":
        return [(-_INF, False, v, False)]
    if op == "<=":
        return [(-_INF, False, v, True)]
    if op == "=":
        return [(v, True, v, True)]
    return [(-_INF, False, v, False), (v, False, _INF, False)]


def _meet(a: tuple, b: tuple) -> bool:
    if a[0] > b[0]:
        lo, lo_closed = a[0], a[1]
    elif a[0] < b[0]:
        lo, lo_closed = b[0], b[1]
    else:
        lo, lo_closed = a[0], a[1] and b[1]
    if a[2] < b[2]:
        hi, hi_closed = a[2], a[3]
    elif a[2] > b[2]:
        hi, hi_closed = b[2], b[3]
    else:
        hi, hi_closed = a[2], a[3] and b[3]
    return lo < hi or (lo == hi and lo_closed and hi_closed)


def _jointly_possible(s1: SimpleExpression, s2: SimpleExpression) -> bool:
    """Same attribute, same literal type: can both comparisons hold?"""
    if s1.numeric:
        return any(_meet(a, b) for a in _interval(s1.op, s1.literal)
                   for b in _interval(s2.op, s2.literal))
    if s1.op == "=" and s2.op == "=":
        return s1.literal == s2.literal
    if s1.op == "!=" and s2.op == "!=":
        return True
    return s1.literal != s2.literal


def check_two_simple(s1: SimpleExpression, s2: SimpleExpression) -> Verdict:
    """Classify a pair of comparisons found in the same conjunct.

    NR when the two can never hold together.  PR when they can, but the
    policy-side comparison rejects some value the user-side one accepts.
    """
    if s1.attribute != s2.attribute:
        return Verdict.NONE
    if s1.numeric != s2.numeric:
        if "=" in (s1.op, s2.op):
            return Verdict.NR
        log.warning("incomparable literal types on %s: %s vs %s", s1.attribute, s1, s2)
        return Verdict.NONE
    if not _jointly_possible(s1, s2):
        return Verdict.NR
    if s1.origin == s2.origin:
        return Verdict.NONE
    user, policy = (s1, s2) if s1.origin == "user" else (s2, s1)
    if _jointly_possible(user, policy.negate()):
        return Verdict.PR
    return Verdict.NONE


@dataclass(frozen=True)
class Warning:
    kind: Verdict = Verdict.NONE
    explanation: str = ""
    witnesses: tuple = ()  # tuple[tuple[SimpleExpression, SimpleExpression], ...]

    def __post_init__(self):
        if self.kind is Verdict.NONE and self.witnesses:
            raise ValueError("a None warning carries no witnesses")


def conjunct_satisfiable(conj) -> bool:
    """Exact satisfiability of a conjunction of simple expressions."""
    groups = defaultdict(list)
    for e in conj:
        groups[e.attribute].append(e)
    for group in groups.values():
        numeric = [e for e in group if e.numeric]
        text = [e for e in group if not e.numeric]
        if numeric and text:
            return False
        if text:
            equal = {e.literal for e in text if e.op == "="}
            differ = {e.literal for e in text if e.op == "!="}
            if len(equal) > 1 or equal & differ:
                return False
            continue
        lo, lo_closed, hi, hi_closed = -_INF, False, _INF, False
        excluded = set()
        for e in numeric:
            if e.op == "!=":
                excluded.add(e.literal)
                continue
            for ilo, ilc, ihi, ihc in _interval(e.op, e.literal):
                if ilo > lo or (ilo == lo and not ilc):
                    lo, lo_closed = ilo, ilc
                if ihi < hi or (ihi == hi and not ihc):
                    hi, hi_closed = ihi, ihc
        if lo > hi or (lo == hi and not (lo_closed and hi_closed)):
            return False
        if lo == hi and lo in excluded:
            return False
    return True


def _explain(kind: Verdict, pairs) -> str:
    shown = ", ".join(f"({a}, {b})" for a, b in pairs[:8])
    more = f" and {len(pairs) - 8} more" if len(pairs) > 8 else ""
    if kind is Verdict.NR:
        return ("every disjunct of the merged filter contains contradictory "
                f"comparisons; no tuple can pass: {shown}{more}")
    return ("the policy filter withholds some tuples the query would accept: "
            f"{shown}{more}")


def analyze_merge(policy_pred: Predicate, user_pred: Predicate,
                  cap: int = DEFAULT_DNF_CAP) -> Warning:
    """Static NR/PR analysis of ``policy_pred AND user_pred``.

    Raises DnfCapacityError when the normal form grows beyond ``cap``.
    """
    merged = And(with_origin(policy_pred, "policy"), with_origin(user_pred, "user"))
    dnf = to_dnf(eliminate_not(merged), cap)

    marks = []
    nr_pairs: list = []
    pr_pairs: list = []
    for conj in dnf.disjuncts:
        mark = Verdict.NONE
        for s1, s2 in itertools.combinations(conj, 2):
            kind = check_two_simple(s1, s2)
            if kind is Verdict.NR:
                mark = Verdict.NR
                nr_pairs.append((s1, s2))
            elif kind is Verdict.PR:
                if mark is Verdict.NONE:
                    mark = Verdict.PR
                pr_pairs.append((s1, s2))
        marks.append(mark)

    nr_pairs = list(dict.fromkeys(nr_pairs))
    pr_pairs = list(dict.fromkeys(pr_pairs))
    if all(m is Verdict.NR for m in marks):
        return Warning(Verdict.NR, _explain(Verdict.NR, nr_pairs), tuple(nr_pairs))
    if all(m is not Verdict.NONE for m in marks):
        # Pairwise marks are local to one disjunct; confirm that some
        # user-accepted value really is rejected by the policy.
        blocked = to_dnf(eliminate_not(
            And(with_origin(user_pred, "user"), Not(with_origin(policy_pred, "policy")))), cap)
        if any(conjunct_satisfiable(c) for c in blocked.disjuncts):
            return Warning(Verdict.PR, _explain(Verdict.PR, pr_pairs), tuple(pr_pairs))
        log.debug("pairwise PR marks not confirmed for %s / %s", policy_pred, user_pred)
    return Warning(Verdict.NONE, "")


# --------------------------------------------------------------------------
# exhaustive satisfiability oracle

def _candidates(exprs: list[SimpleExpression]) -> list:
    """Representative values covering every region the literals induce."""
    numbers = sorted({e.literal for e in exprs if e.numeric})
    strings = sorted({e.literal for e in exprs if not e.numeric})
    values: list = []
    if numbers:
        values.append(numbers[0] - 1)
        for lo, hi in zip(numbers, numbers[1:]):
            values += [lo, (lo + hi) / 2]
        values += [numbers[-1], numbers[-1] + 1]
    if strings:
        fresh = "_" + max(strings, key=len) + "_"
        values += strings + [fresh]
    return values


def sat_oracle(p: Predicate) -> tuple[bool, dict | None]:
    """Decide satisfiability of ``p`` by exhaustive evaluation.

    Comparisons against literals only distinguish the regions between
    literal values, so evaluating the tree on one representative per
    region of every attribute is exact.  Returns the flag and a witness
    assignment (None when unsatisfiable).
    """
    by_attr = defaultdict(list)
    for e in leaves(p):
        by_attr[e.attribute].append(e)
    names = sorted(by_attr)
    cands = {a: _candidates(by_attr[a]) for a in names}
    axis = {a: i for i, a in enumerate(names)}
    ndim = len(names)

    def grid(node) -> np.ndarray:
        if isinstance(node, Leaf):
            e = node.expr
            vec = np.array([e.holds(v) for v in cands[e.attribute]], dtype=bool)
            shape = [1] * ndim
            shape[axis[e.attribute]] = len(vec)
            return vec.reshape(shape)
        if isinstance(node, Not):
            return ~grid(node.operand)
        if isinstance(node, And):
            return grid(node.left) & grid(node.right)
        return grid(node.left) | grid(node.right)

    result = np.broadcast_to(grid(p), tuple(len(cands[a]) for a in names))
    hits = np.argwhere(result)
    if len(hits) == 0:
        return False, None
    first = hits[0]
    return True, {a: cands[a][int(first[axis[a]])] for a in names}
