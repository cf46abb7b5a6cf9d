"""Push-notification service fed from the recommendations topic."""

from __future__ import annotations

import json
import urllib.request
from pathlib import Path
from typing import Optional, Protocol, Union

from ..theta.broker import Broker

RECOMMENDATIONS_TOPIC = "recommendations"


class DeliveryFailed(Exception):
    pass


class NotificationSink(Protocol):
    def deliver(self, message: dict) -> None: ...


class MemorySink:
    """Keeps delivered messages; ``fail_next`` makes the next calls fail."""

    def __init__(self):
        self.delivered: list[dict] = []
        self.fail_next = 0
        self.attempts = 0

    def deliver(self, message: dict) -> None:
        self.attempts += 1
        if self.fail_next > 0:
            self.fail_next -= 1
            raise DeliveryFailed("sink unavailable")
        self.delivered.append(dict(message))


class FileSink:
    def __init__(self, path: Union[str, Path]):
        self.path = Path(path)

    def deliver(self, message: dict) -> None:
        with open(self.path, "a", encoding="utf-8", newline="\n") as fh:
            fh.write(json.dumps(message, sort_keys=True) + "\n")


class HttpNotifySink:
    """POSTs the push message as JSON; anything but 2xx is a failure."""

    def __init__(self, url: str, timeout_s: float = 2.0):
        self.url = url
        self.timeout_s = timeout_s

    def deliver(self, message: dict) -> None:
        body = json.dumps(message).encode("utf-8")
        req = urllib.request.Request(self.url, data=body, method="POST",
                                     headers={"Content-Type": "application/json"})
        try:
            with urllib.request.urlopen(req, timeout=self.timeout_s) as resp:
                if not 200 <= resp.status < 300:
                    raise DeliveryFailed(f"{self.url} answered {resp.status}")
        except OSError as exc:  # URLError and HTTPError are OSErrors
            raise DeliveryFailed(str(exc)) from exc


def push_message(doc: dict) -> dict:
    return {"vehicleid": doc["vehicleid"], "station_id": doc["station_id"],
            "price": doc["price"], "expected_cost": doc["expected_cost"]}


class NotificationService:
    """Delivers each (writer batch, vehicle) once and acks only after success."""

    def __init__(self, broker: Broker, sink: NotificationSink, *,
                 topic: str = RECOMMENDATIONS_TOPIC, group: str = "notifier"):
        self.broker = broker
        self.sink = sink
        self.topic = topic
        self.group = group
        self.done: set[tuple] = set()
        self.sent = 0
        self.failures = 0
        self.duplicates = 0
        broker.subscribe(group, topic)

    def poll(self, limit: Optional[int] = None) -> int:
        """Handle every deliverable message; returns the number sent."""
        sent = 0
        handled = 0
        while limit is None or handled < limit:
            env = self.broker.consume(self.group, self.topic)
            if env is None:
                break
            handled += 1
            doc = env.json()
            key = (doc["writer_batch_id"], doc["vehicleid"])
            if key in self.done:
                self.duplicates += 1
                self.broker.ack(self.group, env.delivery_id, self.topic)
                continue
            try:
                self.sink.deliver(push_message(doc))
            except Exception:
                # no ack: the broker hands the message out again later
                self.failures += 1
                continue
            self.done.add(key)
            self.broker.ack(self.group, env.delivery_id, self.topic)
            self.sent += 1
            sent += 1
        return sent
