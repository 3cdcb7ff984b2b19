"""Embedded continuous-query engine.

Streams are registered with a schema and fed with :meth:`Engine.push`.
Each deployed query graph processes every pushed tuple in push order and
broadcasts its output to the subscribers of its handle.
"""
from __future__ import annotations

import itertools
import json
import logging
import math
import re
import threading
from collections import deque
from dataclasses import dataclass
from typing import Iterator, Mapping, Sequence

from .predicate import And, Leaf, Not, Or, Predicate
from .querygraph import (
    GraphError, QueryGraph, Schema, WindowAggOp, coerce_value, output_schema_of,
    timestamp_field, validate_graph, window_layout,
)

log = logging.getLogger(__name__)

EOS_LINE = ".eos"
DEFAULT_SUBSCRIBER_BUFFER = 10_000


class EngineError(Exception):
    pass


class UnknownStreamError(EngineError, KeyError):
    pass


class UnknownGraphError(EngineError, KeyError):
    pass


class DeadHandleError(EngineError):
    pass


@dataclass(frozen=True)
class StreamHandle:
    uri: str

    @classmethod
    def for_graph(cls, host: str, graph_id: str) -> "StreamHandle":
        return cls(f"stream://{host}/{graph_id}")

    @property
    def graph_id(self) -> str:
        return self.uri.rsplit("/", 1)[-1]

    def __str__(self) -> str:
        return self.uri


def _as_handle(handle) -> StreamHandle:
    return handle if isinstance(handle, StreamHandle) else StreamHandle(str(handle))


# ----------------------------------------------------------------- subscribers

_EOS = object()


class Subscription:
    """Ordered output of one deployment, as seen by one subscriber.

    ``put`` blocks while ``maxsize`` tuples are waiting.  Closing discards
    anything not yet consumed: a revoked handle yields end-of-stream next.
    """

    def __init__(self, handle: StreamHandle, schema: Schema,
                 maxsize: int = DEFAULT_SUBSCRIBER_BUFFER):
        self.handle = handle
        self.schema = schema
        self._items: deque = deque()
        self._maxsize = maxsize
        self._closed = False
        self._cond = threading.Condition()

    @property
    def closed(self) -> bool:
        return self._closed

    def put(self, item: tuple) -> None:
        with self._cond:
            while len(self._items) >= self._maxsize and not self._closed:
                self._cond.wait()
            if self._closed:
                return
            self._items.append(item)
            self._cond.notify_all()

    def close(self) -> None:
        with self._cond:
            self._closed = True
            self._items.clear()
            self._cond.notify_all()

    def get(self, timeout: float | None = None):
        """Next output tuple; None at end-of-stream.  TimeoutError if none arrives."""
        with self._cond:
            if not self._cond.wait_for(lambda: self._items or self._closed, timeout):
                raise TimeoutError("no tuple within timeout")
            if self._items:
                item = self._items.popleft()
                self._cond.notify_all()
                return item
            return None

    def drain(self) -> list:
        """All tuples available right now, without waiting."""
        with self._cond:
            items = list(self._items)
            self._items.clear()
            self._cond.notify_all()
            return items

    def __iter__(self) -> Iterator[tuple]:
        while True:
            item = self.get()
            if item is None:
                return
            yield item


# ----------------------------------------------------------------- operators

def _aggregate(func: str, values: list):
    if func == "avg":
        return sum(values) / len(values)
    if func == "sum":
        return sum(values)
    if func == "max":
        return max(values)
    if func == "min":
        return min(values)
    if func == "count":
        return len(values)
    if func == "lastval":
        return values[-1]
    if func == "firstval":
        return values[0]
    raise ValueError(f"unknown aggregate {func!r}")


def execute_window(op: WindowAggOp, window: Sequence[tuple], schema: Schema) -> tuple:
    """Aggregate one complete window of ``schema`` tuples into one output tuple."""
    if not window:
        raise ValueError("cannot aggregate an empty window")
    out = []
    for attr, func in window_layout(op, schema):
        i = schema.index(attr)
        out.append(_aggregate(func, [t[i] for t in window]))
    return tuple(out)


def compile_predicate(p: Predicate, schema: Schema):
    """Closure evaluating ``p`` on positional tuples of ``schema``."""
    if isinstance(p, Leaf):
        i = schema.index(p.expr.attribute)
        holds = p.expr.holds
        return lambda t: holds(t[i])
    if isinstance(p, Not):
        inner = compile_predicate(p.operand, schema)
        return lambda t: not inner(t)
    left = compile_predicate(p.left, schema)
    right = compile_predicate(p.right, schema)
    if isinstance(p, And):
        return lambda t: left(t) and right(t)
    assert isinstance(p, Or)
    return lambda t: left(t) or right(t)


class DeployedQuery:
    def __init__(self, graph_id: str, graph: QueryGraph, schema: Schema, handle: StreamHandle):
        self.graph_id = graph_id
        self.graph = graph
        self.input = graph.source
        self.handle = handle
        self.output_schema = validate_graph(graph, schema)
        self.live = True
        self.subscribers: list[Subscription] = []

        self._filter = compile_predicate(graph.filter.condition, schema) if graph.filter else None
        projected = schema
        self._project = None
        if graph.map is not None:
            projected = output_schema_of(graph.map, schema)
            idx = [schema.index(n) for n in projected.names]
            self._project = lambda t: tuple(t[i] for i in idx)
        self._window = graph.window
        self._window_schema = projected
        self._count = 0
        self._buffer: deque = deque()
        if self._window is not None:
            if self._window.window_type == "tuple":
                self._buffer = deque(maxlen=self._window.size)
            else:
                self._ts = schema.index(timestamp_field(schema))
                self._t0 = None
                self._k = 0
                self._last_ts = None

    def open_windows(self) -> int:
        """Windows that have started but not yet been emitted (tuple windows)."""
        w = self._window
        if w is None or w.window_type != "tuple" or self._count == 0:
            return 0
        started = (self._count - 1) // w.step + 1
        finished = 0 if self._count < w.size else (self._count - w.size) // w.step + 1
        return started - finished

    def process(self, t: tuple) -> list[tuple]:
        if self._filter is not None and not self._filter(t):
            return []
        row = self._project(t) if self._project else t
        w = self._window
        if w is None:
            return [row]
        if w.window_type == "tuple":
            self._buffer.append(row)
            self._count += 1
            if self._count >= w.size and (self._count - w.size) % w.step == 0:
                return [execute_window(w, self._buffer, self._window_schema)]
            return []
        return self._process_time(t[self._ts], row)

    def _process_time(self, ts, row: tuple) -> list[tuple]:
        w = self._window
        if self._t0 is None:
            self._t0 = ts
        elif ts < self._last_ts:
            log.debug("%s: dropping out-of-order tuple at %s", self.graph_id, ts)
            return []
        self._last_ts = ts
        out = []
        while self._t0 + self._k * w.step + w.size <= ts:
            start = self._t0 + self._k * w.step
            end = start + w.size
            members = [r for s, r in self._buffer if start <= s < end]
            if members:
                out.append(execute_window(w, members, self._window_schema))
            self._k += 1
            next_start = self._t0 + self._k * w.step
            while self._buffer and self._buffer[0][0] < next_start:
                self._buffer.popleft()
            if not self._buffer:
                # skip windows that can only be empty
                jump = math.floor((ts - self._t0 - w.size) / w.step) + 1
                self._k = max(self._k, jump)
        self._buffer.append((ts, row))
        return out

    def discard_state(self) -> None:
        self._buffer.clear()


# ----------------------------------------------------------------- engine

class _Stream:
    def __init__(self, schema: Schema):
        self.schema = schema
        self.lock = threading.Lock()
        self.deployments: list[DeployedQuery] = []


class Engine:
    """In-process stream engine.

    Pushes to one stream are serialized; pushes to different streams may
    run concurrently.  Deploy and withdraw take the stream's lock, so a
    push sees the deployment set either before or after the change.
    """

    def __init__(self, host: str = "local", subscriber_buffer: int = DEFAULT_SUBSCRIBER_BUFFER):
        self.host = host
        self.subscriber_buffer = subscriber_buffer
        self._streams: dict[str, _Stream] = {}
        self._deployed: dict[str, DeployedQuery] = {}
        self._lock = threading.Lock()
        self._ids = itertools.count(1)

    # streams
    def register_stream(self, schema: Schema) -> None:
        with self._lock:
            if schema.stream_name in self._streams:
                raise EngineError(f"stream {schema.stream_name!r} already registered")
            self._streams[schema.stream_name] = _Stream(schema)

    def schema(self, name: str) -> Schema | None:
        stream = self._streams.get(name)
        return stream.schema if stream else None

    @property
    def schemas(self) -> dict[str, Schema]:
        return {name: s.schema for name, s in self._streams.items()}

    def _stream(self, name: str) -> _Stream:
        try:
            return self._streams[name]
        except KeyError:
            raise UnknownStreamError(f"unknown stream {name!r}") from None

    def push(self, stream: str, values: Sequence | Mapping) -> None:
        s = self._stream(stream)
        schema = s.schema
        if isinstance(values, Mapping):
            if set(values) != set(schema.names):
                raise GraphError(f"tuple fields {sorted(values)} do not match {schema}")
            values = [values[n] for n in schema.names]
        if len(values) != len(schema.fields):
            raise GraphError(
                f"tuple has {len(values)} values, {schema.stream_name} has {len(schema.fields)}")
        t = tuple(coerce_value(v, ftype) for v, (_, ftype) in zip(values, schema.fields))
        with s.lock:
            for dq in s.deployments:
                if not dq.live:
                    continue
                for out in dq.process(t):
                    for sub in dq.subscribers:
                        sub.put(out)

    # deployments
    def deploy(self, graph: QueryGraph) -> StreamHandle:
        s = self._stream(graph.source)
        with self._lock:
            graph_id = f"g{next(self._ids)}"
        handle = StreamHandle.for_graph(self.host, graph_id)
        dq = DeployedQuery(graph_id, graph, s.schema, handle)
        with s.lock:
            with self._lock:
                self._deployed[graph_id] = dq
            s.deployments = s.deployments + [dq]
        log.debug("deployed %s: %s", graph_id, graph)
        return handle

    def withdraw(self, graph_id: str) -> None:
        with self._lock:
            dq = self._deployed.pop(graph_id, None)
            if dq is None:
                raise UnknownGraphError(f"no deployed graph {graph_id!r}")
            dq.live = False
            subs = list(dq.subscribers)
        # close before taking the stream lock: a push blocked on a full
        # subscriber buffer must be released first
        for sub in subs:
            sub.close()
        s = self._streams[dq.input]
        with s.lock:
            s.deployments = [d for d in s.deployments if d is not dq]
            dq.discard_state()
        log.debug("withdrew %s", graph_id)

    def deployment(self, handle) -> DeployedQuery:
        dq = self._deployed.get(_as_handle(handle).graph_id)
        if dq is None or dq.handle != _as_handle(handle):
            raise DeadHandleError(f"handle {handle} is not live")
        return dq

    def is_live(self, handle) -> bool:
        try:
            self.deployment(handle)
        except DeadHandleError:
            return False
        return True

    @property
    def deployed_ids(self) -> list[str]:
        with self._lock:
            return list(self._deployed)

    def subscribe(self, handle, maxsize: int | None = None) -> Subscription:
        with self._lock:
            dq = self.deployment(handle)
            sub = Subscription(dq.handle, dq.output_schema, maxsize or self.subscriber_buffer)
            dq.subscribers = dq.subscribers + [sub]
        return sub


# ----------------------------------------------------------------- rendering

def _window_name(w: WindowAggOp) -> str:
    return f"_{w.size}{w.window_type}"


def render_streamsql(graph: QueryGraph, schema: Schema) -> str:
    """StreamSQL-like script equivalent to ``graph``."""
    validate_graph(graph, schema)
    columns = ",\n  ".join(f"{n} {t}" for n, t in schema.fields)
    parts = [f"CREATE INPUT STREAM {schema.stream_name} (\n  {columns}\n);"]
    ops = graph.operators
    if not ops:
        parts.append("CREATE OUTPUT STREAM output;\n"
                     f"SELECT * FROM {schema.stream_name} INTO output;")
        return "\n\n".join(parts) + "\n"

    current, cur_schema = schema.stream_name, schema
    for i, op in enumerate(ops):
        last = i == len(ops) - 1
        target = "output" if last else f"internal_{i}"
        create = "CREATE OUTPUT STREAM output;" if last else f"CREATE STREAM {target};"
        if op is graph.filter:
            stmt = f"SELECT * FROM {current} WHERE {op.condition} INTO {target};"
            lines = [create, stmt]
        elif op is graph.map:
            cols = ", ".join(f"{current}.{n}" for n in output_schema_of(op, cur_schema).names)
            lines = [create, f"SELECT {cols} FROM {current} INTO {target};"]
        else:
            name = _window_name(op)
            if op.window_type == "tuple":
                advance = f"ADVANCE {op.step} TUPLES"
            else:
                advance = f"ADVANCE {op.step} ON {timestamp_field(schema)}"
            cols = ",\n  ".join(f"{func}({attr}) AS {func}{attr}"
                                for attr, func in window_layout(op, cur_schema))
            lines = [create,
                     f"CREATE WINDOW {name}(SIZE {op.size} {advance});",
                     f"SELECT {cols}\nFROM {current}[{name}] INTO {target};"]
        parts.append("\n".join(lines))
        cur_schema = output_schema_of(op, cur_schema)
        current = target
    return "\n\n".join(parts) + "\n"


# ----------------------------------------------------------------- wire format

_PAIR = re.compile(r'([A-Za-z_]\w*)=("(?:[^"\\]|\\.)*"|[^\s]+)')


def encode_record(schema: Schema, t: tuple) -> str:
    """One subscription record: ``field=value`` pairs in schema order."""
    return encode_pairs(schema.names, t)


def encode_pairs(names, values) -> str:
    return " ".join(f"{n}={json.dumps(v)}" for n, v in zip(names, values))


def decode_record(line: str) -> dict | None:
    """Inverse of :func:`encode_record`; None for the end-of-stream line."""
    line = line.rstrip("\n")
    if line == EOS_LINE:
        return None
    return {m.group(1): json.loads(m.group(2)) for m in _PAIR.finditer(line)}
