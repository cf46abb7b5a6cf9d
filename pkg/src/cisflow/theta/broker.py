"""In-memory message broker with per-group acknowledgement and redelivery."""

from __future__ import annotations

import heapq
import itertools
import json
import threading
from dataclasses import dataclass, field
from typing import Any, Callable, Optional

from ..clock import VirtualClock

DEFAULT_VISIBILITY_MS = 5_000


class BrokerError(Exception):
    pass


class UnknownDelivery(BrokerError, KeyError):
    pass


@dataclass(frozen=True)
class Envelope:
    delivery_id: int
    message_id: str
    topic: str
    payload: bytes
    publish_ts: int
    redelivery_count: int = 0

    def json(self) -> Any:
        return json.loads(self.payload.decode("utf-8"))


@dataclass
class _Message:
    message_id: str
    offset: int
    payload: bytes
    publish_ts: int


@dataclass
class ConsumerGroup:
    name: str
    topic: str
    cursor: int = 0
    redeliver: list = field(default_factory=list)  # heap of (offset, redelivery_count)
    unacked: dict = field(default_factory=dict)  # delivery_id -> (offset, deadline, count)
    acked: int = 0

    def pending(self, published: int) -> int:
        return published - self.cursor + len(self.redeliver)


class Broker:
    """Topics are retained logs; each consumer group keeps its own cursor.

    Delivery is at-least-once per group: an envelope that is not acked before
    its visibility deadline goes back to the group's queue.  First deliveries
    are FIFO per topic; redeliveries are served ahead of new messages, oldest
    first.
    """

    def __init__(self, clock: Optional[Callable[[], int]] = None,
                 visibility_timeout_ms: int = DEFAULT_VISIBILITY_MS):
        self.clock = clock or VirtualClock()
        self.visibility_timeout_ms = visibility_timeout_ms
        self._topics: dict[str, list[_Message]] = {}
        self._groups: dict[tuple[str, str], ConsumerGroup] = {}
        self._delivery_ids = itertools.count(1)
        self._lock = threading.RLock()

    def publish(self, topic: str, payload) -> str:
        if not isinstance(payload, (bytes, bytearray)):
            payload = json.dumps(payload, sort_keys=True, separators=(",", ":")).encode("utf-8")
        with self._lock:
            log = self._topics.setdefault(topic, [])
            message_id = f"{topic}:{len(log)}"
            log.append(_Message(message_id, len(log), bytes(payload), self.clock()))
            return message_id

    def subscribe(self, group: str, topic: str) -> ConsumerGroup:
        with self._lock:
            self._topics.setdefault(topic, [])
            key = (group, topic)
            if key not in self._groups:
                self._groups[key] = ConsumerGroup(group, topic)
            return self._groups[key]

    def _expire(self, g: ConsumerGroup, now: int) -> None:
        expired = [d for d, (_, deadline, _) in g.unacked.items() if deadline <= now]
        for d in expired:
            offset, _, count = g.unacked.pop(d)
            heapq.heappush(g.redeliver, (offset, count + 1))

    def consume(self, group: str, topic: str, *, auto_ack: bool = False,
                published_by: Optional[int] = None) -> Optional[Envelope]:
        """Next envelope for ``group`` or None when nothing is deliverable.

        ``published_by`` holds back first deliveries published after that
        time, for consumers that poll on a simulated schedule.
        """
        with self._lock:
            g = self.subscribe(group, topic)
            now = self.clock()
            self._expire(g, now)
            log = self._topics[topic]
            if g.redeliver:
                offset, count = heapq.heappop(g.redeliver)
            elif g.cursor < len(log) and (published_by is None
                                          or log[g.cursor].publish_ts <= published_by):
                offset, count = g.cursor, 0
                g.cursor += 1
            else:
                return None
            msg = log[offset]
            env = Envelope(next(self._delivery_ids), msg.message_id, topic, msg.payload,
                           msg.publish_ts, count)
            if auto_ack:
                g.acked += 1
            else:
                g.unacked[env.delivery_id] = (offset, now + self.visibility_timeout_ms, count)
            return env

    def consume_all(self, group: str, topic: str, *, auto_ack: bool = False,
                    limit: Optional[int] = None) -> list[Envelope]:
        out = []
        while limit is None or len(out) < limit:
            env = self.consume(group, topic, auto_ack=auto_ack)
            if env is None:
                break
            out.append(env)
        return out

    def ack(self, group: str, delivery_id: int, topic: Optional[str] = None) -> None:
        with self._lock:
            groups = [g for (name, t), g in self._groups.items()
                      if name == group and (topic is None or t == topic)]
            for g in groups:
                if delivery_id in g.unacked:
                    del g.unacked[delivery_id]
                    g.acked += 1
                    return
            raise UnknownDelivery(f"delivery {delivery_id} is not outstanding for {group!r}")

    def release(self, group: str, topic: str) -> int:
        """Make all outstanding deliveries of a dead consumer redeliverable now."""
        with self._lock:
            g = self.subscribe(group, topic)
            n = len(g.unacked)
            for offset, _, count in g.unacked.values():
                heapq.heappush(g.redeliver, (offset, count + 1))
            g.unacked.clear()
            return n

    def published(self, topic: str) -> int:
        return len(self._topics.get(topic, ()))

    def counts(self, group: str, topic: str) -> dict[str, int]:
        with self._lock:
            g = self.subscribe(group, topic)
            self._expire(g, self.clock())
            published = self.published(topic)
            return {
                "published": published,
                "acked": g.acked,
                "pending": g.pending(published),
                "unacked": len(g.unacked),
            }

    def topics(self) -> list[str]:
        return sorted(self._topics)
