"""Append-only raw data store and the idempotent serving view."""

from __future__ import annotations

import json
import os
import struct
import threading
from dataclasses import dataclass, field
from typing import Any, Callable, Iterable, Optional

STORE_MAGIC = b"CISI"
STORE_VERSION = 1
_LEN = struct.Struct(">I")


class StoreFormatError(Exception):
    pass


@dataclass(frozen=True)
class ImmutableRecord:
    collection: str
    seq: int
    payload: Any
    append_ts: int


class ImmutableStore:
    """Collections of records that can only grow.

    With ``path`` set, every append is also written as a length-prefixed JSON
    frame to a log file headed by a magic tag and a version byte; opening an
    existing file replays it.
    """

    def __init__(self, path: Optional[str] = None, clock: Callable[[], int] = lambda: 0):
        self.clock = clock
        self.path = path
        self._collections: dict[str, list[ImmutableRecord]] = {}
        self._lock = threading.Lock()
        self._fh = None
        if path is not None:
            if os.path.exists(path) and os.path.getsize(path) > 0:
                for rec in read_store_log(path):
                    self._collections.setdefault(rec.collection, []).append(rec)
                self._fh = open(path, "ab")
            else:
                self._fh = open(path, "wb")
                self._fh.write(STORE_MAGIC + bytes([STORE_VERSION]))
                self._fh.flush()

    def append(self, collection: str, payload: Any) -> int:
        with self._lock:
            records = self._collections.setdefault(collection, [])
            rec = ImmutableRecord(collection, len(records), payload, self.clock())
            records.append(rec)
            if self._fh is not None:
                body = json.dumps({"c": collection, "s": rec.seq, "p": payload,
                                   "t": rec.append_ts}, sort_keys=True).encode("utf-8")
                self._fh.write(_LEN.pack(len(body)) + body)
                self._fh.flush()
            return rec.seq

    def scan(self, collection: str,
             predicate: Optional[Callable[[Any], bool]] = None) -> list[ImmutableRecord]:
        # unknown collections scan as empty so services can cold-start
        with self._lock:
            records = list(self._collections.get(collection, ()))
        if predicate is None:
            return records
        return [r for r in records if predicate(r.payload)]

    def collections(self) -> list[str]:
        return sorted(self._collections)

    def close(self) -> None:
        if self._fh is not None:
            self._fh.close()
            self._fh = None


def read_store_log(path: str) -> list[ImmutableRecord]:
    with open(path, "rb") as fh:
        data = fh.read()
    if data[:4] != STORE_MAGIC:
        raise StoreFormatError(f"{path}: bad magic")
    if data[4] != STORE_VERSION:
        raise StoreFormatError(f"{path}: unsupported version {data[4]}")
    out, pos = [], 5
    while pos < len(data):
        (n,) = _LEN.unpack_from(data, pos)
        pos += _LEN.size
        obj = json.loads(data[pos:pos + n].decode("utf-8"))
        pos += n
        out.append(ImmutableRecord(obj["c"], obj["s"], obj["p"], obj["t"]))
    return out


@dataclass(frozen=True)
class ViewRow:
    table: str
    key: Any
    columns: dict = field(hash=False)
    writer_batch_id: Any


class ServingView:
    """Keyed result tables written per batch.

    Re-applying an upsert with an already seen ``(writer_batch_id, key)`` is
    a no-op, so replayed batches leave the view unchanged.
    """

    def __init__(self):
        self._tables: dict[str, dict[Any, ViewRow]] = {}
        self._applied: set[tuple[str, Any, Any]] = set()
        self._lock = threading.Lock()

    def upsert(self, table: str, key: Any, columns: dict, writer_batch_id: Any) -> bool:
        with self._lock:
            marker = (table, writer_batch_id, key)
            if marker in self._applied:
                return False
            self._applied.add(marker)
            self._tables.setdefault(table, {})[key] = ViewRow(table, key, dict(columns),
                                                              writer_batch_id)
            return True

    def query(self, table: str, key: Any = None,
              where: Optional[Callable[[ViewRow], bool]] = None) -> list[ViewRow]:
        with self._lock:
            rows = self._tables.get(table, {})
            if key is not None:
                row = rows.get(key)
                return [row] if row is not None else []
            out = list(rows.values())
        if where is not None:
            out = [r for r in out if where(r)]
        return out

    def tables(self) -> Iterable[str]:
        return sorted(self._tables)
