"""Centralized, durable key-value store with per-key versions.

Backed by an embedded SQLite database. Every write bumps the key's version by
one; callers get optimistic concurrency by passing the version they read.
``expected_version=0`` means "create only".
"""
from __future__ import annotations

import json
import sqlite3
import threading
from dataclasses import dataclass
from enum import Enum
from pathlib import Path
from typing import Any, Iterable, Iterator, TextIO

from cloudcraft.errors import Conflict, NotFound, Unavailable


class Namespace(str, Enum):
    USERS = "users"
    ORDERS = "orders"
    PRINTERS = "printers"
    BILLING = "billing"
    REDEEM_CODES = "redeem_codes"
    MODELS = "models"


class VersionConflict(Conflict):
    def __init__(self, namespace: str, key: str, expected: int | None, actual: int):
        self.namespace, self.key, self.expected, self.actual = namespace, key, expected, actual
        super().__init__(f"{namespace}/{key}: expected version {expected}, found {actual}")


class NotFoundError(NotFound):
    pass


class StorageUnavailable(Unavailable):
    pass


@dataclass(frozen=True)
class Write:
    namespace: Namespace
    key: str
    value: Any
    expected_version: int | None = None


_SCHEMA = """
CREATE TABLE IF NOT EXISTS records (
    namespace TEXT NOT NULL,
    key TEXT NOT NULL,
    version INTEGER NOT NULL,
    value TEXT NOT NULL,
    PRIMARY KEY (namespace, key)
)
"""


class Store:
    def __init__(self, path: str | Path = ":memory:"):
        self.path = str(path)
        self._lock = threading.RLock()
        try:
            self._db = sqlite3.connect(self.path, check_same_thread=False, isolation_level=None)
            if self.path != ":memory:":
                self._db.execute("PRAGMA journal_mode=WAL")
                self._db.execute("PRAGMA synchronous=NORMAL")
            self._db.execute(_SCHEMA)
        except sqlite3.Error as exc:
            raise StorageUnavailable(f"cannot open store {self.path}: {exc}") from exc

    def close(self) -> None:
        with self._lock:
            self._db.close()

    def _version(self, namespace: str, key: str) -> int:
        row = self._db.execute(
            "SELECT version FROM records WHERE namespace = ? AND key = ?", (namespace, key)
        ).fetchone()
        return row[0] if row else 0

    def put(self, namespace: Namespace, key: str, value: Any, expected_version: int | None = None) -> int:
        return self.put_many([Write(namespace, key, value, expected_version)])[0]

    def put_many(self, writes: Iterable[Write]) -> list[int]:
        """Apply all writes atomically, or none of them."""
        writes = list(writes)
        with self._lock:
            try:
                self._db.execute("BEGIN IMMEDIATE")
                versions = []
                try:
                    for w in writes:
                        ns = Namespace(w.namespace).value
                        current = self._version(ns, w.key)
                        if w.expected_version is not None and w.expected_version != current:
                            raise VersionConflict(ns, w.key, w.expected_version, current)
                        doc = json.dumps(w.value, sort_keys=True, separators=(",", ":"))
                        self._db.execute(
                            "INSERT INTO records (namespace, key, version, value) VALUES (?, ?, ?, ?) "
                            "ON CONFLICT (namespace, key) DO UPDATE SET version = excluded.version, "
                            "value = excluded.value",
                            (ns, w.key, current + 1, doc),
                        )
                        versions.append(current + 1)
                except BaseException:
                    self._db.execute("ROLLBACK")
                    raise
                self._db.execute("COMMIT")
                return versions
            except sqlite3.Error as exc:
                raise StorageUnavailable(str(exc)) from exc

    def get(self, namespace: Namespace, key: str) -> tuple[Any, int]:
        with self._lock:
            try:
                row = self._db.execute(
                    "SELECT value, version FROM records WHERE namespace = ? AND key = ?",
                    (Namespace(namespace).value, key),
                ).fetchone()
            except sqlite3.Error as exc:
                raise StorageUnavailable(str(exc)) from exc
        if row is None:
            raise NotFoundError(f"{Namespace(namespace).value}/{key}")
        return json.loads(row[0]), row[1]

    def find(self, namespace: Namespace, key: str) -> tuple[Any, int] | None:
        try:
            return self.get(namespace, key)
        except NotFoundError:
            return None

    def scan_prefix(self, namespace: Namespace, key_prefix: str = "") -> list[tuple[str, Any]]:
        # Escape LIKE metacharacters so the prefix is matched literally.
        pattern = key_prefix.replace("\\", "\\\\").replace("%", "\\%").replace("_", "\\_") + "%"
        with self._lock:
            try:
                rows = self._db.execute(
                    "SELECT key, value FROM records WHERE namespace = ? AND key LIKE ? ESCAPE '\\' "
                    "ORDER BY key",
                    (Namespace(namespace).value, pattern),
                ).fetchall()
            except sqlite3.Error as exc:
                raise StorageUnavailable(str(exc)) from exc
        # LIKE is case-insensitive for ASCII; re-check exactly.
        return [(k, json.loads(v)) for k, v in rows if k.startswith(key_prefix)]

    def records(self) -> Iterator[dict]:
        with self._lock:
            rows = self._db.execute(
                "SELECT namespace, key, version, value FROM records ORDER BY namespace, key"
            ).fetchall()
        for ns, key, version, value in rows:
            yield {"namespace": ns, "key": key, "version": version, "value": json.loads(value)}

    def dump(self, out: TextIO) -> int:
        """Write every record as one JSON line; returns the record count."""
        count = 0
        for record in self.records():
            out.write(json.dumps(record, sort_keys=True) + "\n")
            count += 1
        return count
