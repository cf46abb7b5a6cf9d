"""Live price access with a TTL cache, and time-weighted price history."""

from __future__ import annotations

import bisect
import json
import threading
import urllib.error
import urllib.request
from dataclasses import dataclass
from typing import Iterable, Optional, Protocol

from .model import FUEL_KINDS, PriceEvent

DAY_MS = 86_400_000


class StationNotFound(KeyError):
    pass


class PriceUnavailable(LookupError):
    """The station exists but has no price for the requested fuel."""


class NoHistory(LookupError):
    pass


class PriceSource(Protocol):
    def fetch(self, station_id: str, now_ms: int) -> dict[str, float]: ...


class StaticPriceSource:
    """Fixed price table; counts upstream fetches."""

    def __init__(self, prices: dict[str, dict[str, float]]):
        self.prices = prices
        self.fetches = 0
        self.down = False

    def fetch(self, station_id: str, now_ms: int) -> dict[str, float]:
        self.fetches += 1
        if self.down:
            raise ConnectionError("price source unavailable")
        try:
            return dict(self.prices[station_id])
        except KeyError:
            raise StationNotFound(station_id) from None


class HttpPriceSource:
    """Talks to ``GET <base>/prices/<station_id>``."""

    def __init__(self, base_url: str, timeout_s: float = 2.0):
        self.base_url = base_url.rstrip("/")
        self.timeout_s = timeout_s
        self.fetches = 0

    def fetch(self, station_id: str, now_ms: int) -> dict[str, float]:
        self.fetches += 1
        url = f"{self.base_url}/prices/{urllib.request.quote(station_id, safe='')}"
        try:
            with urllib.request.urlopen(url, timeout=self.timeout_s) as resp:
                doc = json.loads(resp.read().decode("utf-8"))
        except urllib.error.HTTPError as exc:
            if exc.code == 404:
                raise StationNotFound(station_id) from None
            raise
        return {k: float(v) for k, v in doc.items() if k in FUEL_KINDS and v is not None}


class PriceHistory:
    """Per (station, fuel) change events forming a step-function price."""

    def __init__(self, events: Iterable[PriceEvent] = ()):
        self._times: dict[tuple[str, str], list[int]] = {}
        self._prices: dict[tuple[str, str], list[float]] = {}
        for ev in sorted(events, key=lambda e: e.effective_from):
            self.add(ev)

    def add(self, ev: PriceEvent) -> None:
        key = (ev.station_id, ev.fuel_kind)
        times = self._times.setdefault(key, [])
        prices = self._prices.setdefault(key, [])
        i = bisect.bisect_right(times, ev.effective_from)
        if i and times[i - 1] == ev.effective_from:
            prices[i - 1] = ev.price  # a later event for the same instant wins
            return
        times.insert(i, ev.effective_from)
        prices.insert(i, ev.price)

    def stations(self) -> set[str]:
        return {s for s, _ in self._times}

    def events(self, station_id: str, fuel_kind: str) -> list[tuple[int, float]]:
        key = (station_id, fuel_kind)
        return list(zip(self._times.get(key, []), self._prices.get(key, [])))

    def price_at(self, station_id: str, fuel_kind: str, t_ms: int) -> float:
        key = (station_id, fuel_kind)
        times = self._times.get(key)
        if not times:
            raise NoHistory(key)
        i = bisect.bisect_right(times, t_ms)
        if i == 0:
            raise NoHistory(key)
        return self._prices[key][i - 1]


class HistoryPriceSource:
    """Serves the history's price in force at ``now`` as the live price."""

    def __init__(self, history: PriceHistory):
        self.history = history
        self.fetches = 0

    def fetch(self, station_id: str, now_ms: int) -> dict[str, float]:
        self.fetches += 1
        if station_id not in self.history.stations():
            raise StationNotFound(station_id)
        out = {}
        for fuel in FUEL_KINDS:
            try:
                out[fuel] = self.history.price_at(station_id, fuel, now_ms)
            except NoHistory:
                pass
        return out


class PriceCache:
    """Per (station, fuel) cache; an entry older than the TTL is refetched."""

    def __init__(self, source: PriceSource, ttl_s: float = 300):
        self.source = source
        self.ttl_ms = ttl_s * 1000
        self._entries: dict[tuple[str, str], tuple[float, int]] = {}
        self._lock = threading.Lock()

    def current_price(self, station_id: str, fuel_kind: str, now_ms: int) -> float:
        key = (station_id, fuel_kind)
        with self._lock:
            hit = self._entries.get(key)
            if hit is not None and now_ms - hit[1] < self.ttl_ms:
                return hit[0]
        prices = self.source.fetch(station_id, now_ms)
        with self._lock:
            for fuel, p in prices.items():
                self._entries[(station_id, fuel)] = (p, now_ms)
        if fuel_kind not in prices:
            raise PriceUnavailable(key)
        return prices[fuel_kind]

    # the cache is driver-side state; workers get a fresh empty one
    def __getstate__(self):
        return {"source": self.source, "ttl_ms": self.ttl_ms}

    def __setstate__(self, state):
        self.source = state["source"]
        self.ttl_ms = state["ttl_ms"]
        self._entries = {}
        self._lock = threading.Lock()


def current_price(cache: PriceCache, station_id: str, fuel_kind: str, now_ms: int) -> float:
    return cache.current_price(station_id, fuel_kind, now_ms)


@dataclass(frozen=True)
class PriceStats:
    mean: float
    min: float
    max: float


def historical_average(history: PriceHistory, station_id: str, fuel_kind: str,
                       lookback_days: float, now_ms: int) -> PriceStats:
    """Time-weighted mean, min and max of the price over the lookback window.

    The price in force at the window start is carried forward from the last
    earlier event.  If the first event falls inside the window, averaging
    starts there.
    """
    events = [(t, p) for t, p in history.events(station_id, fuel_kind) if t <= now_ms]
    if not events:
        raise NoHistory((station_id, fuel_kind))
    start = now_ms - lookback_days * DAY_MS
    i = bisect.bisect_right([t for t, _ in events], start)
    # events[i-1] is in force at the window start (if i > 0)
    seg = events[i - 1:] if i else events
    begin = max(start, seg[0][0])
    if begin >= now_ms:
        p = seg[-1][1]
        return PriceStats(p, p, p)
    area = 0.0
    for j, (t, p) in enumerate(seg):
        lo = max(t, begin)
        hi = seg[j + 1][0] if j + 1 < len(seg) else now_ms
        area += p * (hi - lo)
    prices = [p for _, p in seg]
    return PriceStats(area / (now_ms - begin), min(prices), max(prices))


def price_history_from(events: Optional[Iterable[PriceEvent]]) -> PriceHistory:
    return PriceHistory(events or ())
