"""Service discovery with heartbeat TTLs and a round-robin picker.

Mutations are serialized by a lock and publish a fresh immutable snapshot;
readers only ever look at the current snapshot.
"""
from __future__ import annotations

import itertools
import logging
import threading
from dataclasses import dataclass, replace
from types import MappingProxyType
from typing import Mapping

from cloudcraft.domain import Clock, SystemClock
from cloudcraft.errors import CloudCraftError, Conflict, NotFound, Unavailable

log = logging.getLogger(__name__)


class DuplicateInstance(Conflict):
    pass


class UnknownInstance(NotFound):
    pass


class NoLiveInstance(Unavailable):
    pass


@dataclass(frozen=True)
class ServiceRegistration:
    service_name: str
    instance_id: str
    endpoint: str
    registered_at: float
    last_heartbeat: float
    ttl_s: float

    def alive(self, now: float) -> bool:
        return now - self.last_heartbeat <= self.ttl_s


Snapshot = Mapping[str, tuple[ServiceRegistration, ...]]


class ServiceRegistry:
    def __init__(self, clock: Clock | None = None):
        self.clock = clock or SystemClock()
        self._lock = threading.Lock()
        self._snapshot: Snapshot = MappingProxyType({})
        self._cursors: dict[str, itertools.count] = {}

    @property
    def snapshot(self) -> Snapshot:
        return self._snapshot

    def _publish(self, name: str, instances: tuple[ServiceRegistration, ...]) -> None:
        data = dict(self._snapshot)
        if instances:
            data[name] = instances
        else:
            data.pop(name, None)
        self._snapshot = MappingProxyType(data)

    def register(self, name: str, instance_id: str, endpoint: str, ttl_s: float) -> ServiceRegistration:
        if ttl_s <= 0:
            raise CloudCraftError("ttl_s must be positive")
        with self._lock:
            now = self.clock.now()
            current = self._snapshot.get(name, ())
            for reg in current:
                if reg.instance_id == instance_id and reg.alive(now):
                    raise DuplicateInstance(f"{name}/{instance_id} is already registered")
            reg = ServiceRegistration(name, instance_id, endpoint, now, now, ttl_s)
            self._publish(name, tuple(r for r in current if r.instance_id != instance_id) + (reg,))
        log.info("registered %s/%s at %s (ttl %ss)", name, instance_id, endpoint, ttl_s)
        return reg

    def heartbeat(self, name: str, instance_id: str) -> ServiceRegistration:
        with self._lock:
            now = self.clock.now()
            current = self._snapshot.get(name, ())
            for i, reg in enumerate(current):
                if reg.instance_id == instance_id:
                    fresh = replace(reg, last_heartbeat=now)
                    self._publish(name, current[:i] + (fresh,) + current[i + 1:])
                    return fresh
        raise UnknownInstance(f"{name}/{instance_id} is not registered")

    def deregister(self, name: str, instance_id: str) -> None:
        with self._lock:
            current = self._snapshot.get(name, ())
            self._publish(name, tuple(r for r in current if r.instance_id != instance_id))

    def live_instances(self, name: str) -> list[ServiceRegistration]:
        now = self.clock.now()
        return [r for r in self._snapshot.get(name, ()) if r.alive(now)]

    def services(self) -> list[str]:
        return sorted(self._snapshot)

    def resolve(self, name: str) -> str:
        """Next live endpoint for ``name`` in round-robin order."""
        live = self.live_instances(name)
        if not live:
            raise NoLiveInstance(f"no live instance of {name!r}")
        with self._lock:
            cursor = self._cursors.setdefault(name, itertools.count())
            turn = next(cursor)
        return live[turn % len(live)].endpoint
