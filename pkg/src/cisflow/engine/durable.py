"""On-disk formats for the receiver write-ahead log and state checkpoints.

Both files start with a four byte magic tag and a version byte, followed by
length-prefixed records.  Keyed state is pickled per record because user
state is arbitrary Python data.
"""

from __future__ import annotations

import os
import pickle
import struct
from dataclasses import dataclass
from typing import Any, Optional

WAL_MAGIC = b"CISW"
CKPT_MAGIC = b"CISC"
FORMAT_VERSION = 1

_LEN = struct.Struct(">I")
_WAL_HEAD = struct.Struct(">QqHH")  # sequence, receive_ts, id length, source length


class DurableFormatError(Exception):
    pass


class CheckpointWriteFailed(Exception):
    """A checkpoint could not be persisted; processing must stop."""


@dataclass(frozen=True)
class WalRecord:
    sequence: int
    message_id: str
    payload: bytes
    receive_ts: int
    source: str = ""


def encode_wal_record(rec: WalRecord) -> bytes:
    mid = rec.message_id.encode("utf-8")
    src = rec.source.encode("utf-8")
    body = _WAL_HEAD.pack(rec.sequence, rec.receive_ts, len(mid), len(src)) + mid + src \
        + rec.payload
    return _LEN.pack(len(body)) + body


def decode_wal_records(data: bytes) -> list[WalRecord]:
    _check_header(data, WAL_MAGIC, "write-ahead log")
    out, pos = [], 5
    while pos < len(data):
        if pos + _LEN.size > len(data):
            break  # torn tail from a crash mid-append
        (n,) = _LEN.unpack_from(data, pos)
        pos += _LEN.size
        if pos + n > len(data):
            break
        seq, ts, mlen, slen = _WAL_HEAD.unpack_from(data, pos)
        start = pos + _WAL_HEAD.size
        mid = data[start:start + mlen].decode("utf-8")
        src = data[start + mlen:start + mlen + slen].decode("utf-8")
        payload = bytes(data[start + mlen + slen:pos + n])
        out.append(WalRecord(seq, mid, payload, ts, src))
        pos += n
    return out


def _check_header(data: bytes, magic: bytes, what: str) -> None:
    if len(data) < 5 or data[:4] != magic:
        raise DurableFormatError(f"not a {what}: bad magic")
    if data[4] != FORMAT_VERSION:
        raise DurableFormatError(f"{what} version {data[4]} is not supported")


class WriteAheadLog:
    """Append-only record log, in memory or backed by a file."""

    def __init__(self, path: Optional[str] = None):
        self.path = path
        self._records: list[WalRecord] = []
        self._fh = None
        if path is not None:
            if os.path.exists(path) and os.path.getsize(path) > 0:
                with open(path, "rb") as fh:
                    self._records = decode_wal_records(fh.read())
                self._fh = open(path, "ab")
            else:
                self._fh = open(path, "wb")
                self._fh.write(WAL_MAGIC + bytes([FORMAT_VERSION]))
                self._fh.flush()

    @property
    def last_sequence(self) -> int:
        return self._records[-1].sequence if self._records else 0

    def append(self, message_id: str, payload: bytes, receive_ts: int,
               source: str = "") -> WalRecord:
        rec = WalRecord(self.last_sequence + 1, message_id, payload, receive_ts, source)
        if self._fh is not None:
            self._fh.write(encode_wal_record(rec))
            self._fh.flush()
        self._records.append(rec)
        return rec

    def records(self, after: int = 0) -> list[WalRecord]:
        return [r for r in self._records if r.sequence > after]

    def __len__(self) -> int:
        return len(self._records)

    def close(self) -> None:
        if self._fh is not None:
            self._fh.close()
            self._fh = None


@dataclass
class CheckpointImage:
    checkpoint_ts: int
    wal_high_water: int
    last_batch: int
    # stateful operator name -> list of partitions of (key, state, last_update_ts)
    states: dict[str, list[list[tuple[Any, Any, int]]]]


def encode_state(states: dict[str, list[list[tuple]]]) -> bytes:
    parts = [CKPT_MAGIC, bytes([FORMAT_VERSION])]
    for name, partitions in sorted(states.items()):
        header = pickle.dumps(("op", name, len(partitions)), protocol=4)
        parts.append(_LEN.pack(len(header)) + header)
        for pidx, records in enumerate(partitions):
            for rec in records:
                body = pickle.dumps((pidx, rec), protocol=4)
                parts.append(_LEN.pack(len(body)) + body)
    return b"".join(parts)


def decode_state(data: bytes) -> dict[str, list[list[tuple]]]:
    _check_header(data, CKPT_MAGIC, "checkpoint")
    states: dict[str, list[list[tuple]]] = {}
    current: Optional[list[list[tuple]]] = None
    pos = 5
    while pos < len(data):
        (n,) = _LEN.unpack_from(data, pos)
        pos += _LEN.size
        obj = pickle.loads(data[pos:pos + n])
        pos += n
        if obj[0] == "op":
            current = [[] for _ in range(obj[2])]
            states[obj[1]] = current
        else:
            pidx, rec = obj
            current[pidx].append(tuple(rec))
    return states


def write_checkpoint(directory: str, image: CheckpointImage) -> str:
    """Write ``image`` under ``directory``; any IO error becomes CheckpointWriteFailed."""
    target = os.path.join(directory, f"ckpt-{image.checkpoint_ts}")
    try:
        os.makedirs(target, exist_ok=True)
        tmp = os.path.join(target, "state.bin.tmp")
        with open(tmp, "wb") as fh:
            fh.write(encode_state(image.states))
        os.replace(tmp, os.path.join(target, "state.bin"))
        # meta is written last: a directory without it is an incomplete checkpoint
        with open(os.path.join(target, "meta"), "w", encoding="utf-8", newline="\n") as fh:
            fh.write(f"wal_high_water={image.wal_high_water}\n")
            fh.write(f"last_batch={image.last_batch}\n")
    except OSError as exc:
        raise CheckpointWriteFailed(f"checkpoint at {target} failed: {exc}") from exc
    return target


def read_checkpoint(path: str) -> CheckpointImage:
    meta: dict[str, int] = {}
    with open(os.path.join(path, "meta"), encoding="utf-8") as fh:
        for line in fh:
            if "=" in line:
                k, v = line.strip().split("=", 1)
                meta[k] = int(v)
    with open(os.path.join(path, "state.bin"), "rb") as fh:
        states = decode_state(fh.read())
    ts = int(os.path.basename(os.path.normpath(path)).split("-", 1)[1])
    return CheckpointImage(ts, meta["wal_high_water"], meta["last_batch"], states)


def latest_checkpoint(directory: str) -> Optional[str]:
    if not os.path.isdir(directory):
        return None
    done = []
    for name in os.listdir(directory):
        full = os.path.join(directory, name)
        if name.startswith("ckpt-") and os.path.exists(os.path.join(full, "meta")):
            done.append((int(name.split("-", 1)[1]), full))
    return max(done)[1] if done else None


def list_checkpoints(directory: str) -> list[int]:
    if not os.path.isdir(directory):
        return []
    return sorted(int(n.split("-", 1)[1]) for n in os.listdir(directory)
                  if n.startswith("ckpt-") and os.path.exists(os.path.join(directory, n, "meta")))

