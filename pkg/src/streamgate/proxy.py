"""Client-side proxy that caches stream handles, not data."""
from __future__ import annotations

import logging
import threading
import time
from dataclasses import dataclass
from typing import Callable, Protocol

from .gateway import RequestOutcome
from .policy import AccessRequest, fingerprint, user_query_key

log = logging.getLogger(__name__)


class Backend(Protocol):
    def handle_request(self, req: AccessRequest) -> RequestOutcome: ...
    def is_live(self, handle) -> bool: ...


@dataclass(frozen=True)
class CacheEntry:
    key: str
    resource: str
    outcome: RequestOutcome
    inserted_at: float

    @property
    def handle(self):
        return self.outcome.handle


def cache_key(req: AccessRequest) -> str:
    return "\n".join([fingerprint(req.credentials), req.resource, req.action,
                      user_query_key(req.user_query)])


class CachingProxy:
    """Serves repeated requests from cached handles.

    Every hit is checked with a liveness probe so a withdrawn handle is
    never served.  ``ttl`` (seconds) optionally skips the probe for entries
    younger than ``ttl``; the default probes on every hit.
    """

    def __init__(self, backend: Backend, ttl: float | None = None):
        self.backend = backend
        self.ttl = ttl
        self._entries: dict[str, CacheEntry] = {}
        self._lock = threading.Lock()
        self.hits = 0
        self.misses = 0

    def __len__(self) -> int:
        return len(self._entries)

    def proxy_request(self, req: AccessRequest) -> tuple[RequestOutcome, bool]:
        key = cache_key(req)
        entry = self._entries.get(key)
        if entry is not None:
            fresh = self.ttl is not None and time.monotonic() - entry.inserted_at < self.ttl
            if fresh or self.backend.is_live(entry.handle):
                self.hits += 1
                return entry.outcome, True
            log.info("evicting dead handle %s", entry.handle)
            with self._lock:
                if self._entries.get(key) is entry:
                    del self._entries[key]

        self.misses += 1
        outcome = self.backend.handle_request(req)
        if outcome.granted:
            with self._lock:
                self._entries[key] = CacheEntry(key, req.resource, outcome, time.monotonic())
        return outcome, False

    def invalidate(self, predicate: Callable[[CacheEntry], bool] = lambda e: True) -> int:
        with self._lock:
            doomed = [k for k, e in self._entries.items() if predicate(e)]
            for k in doomed:
                del self._entries[k]
        return len(doomed)

    def invalidate_resource(self, resource: str) -> int:
        return self.invalidate(lambda e: e.resource == resource)
