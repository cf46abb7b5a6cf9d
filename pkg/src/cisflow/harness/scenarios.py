"""Seeded vehicle-message generators for the load scenarios.

* LS1: every message comes from the same vehicle.
* LS2(n): n vehicles driving at once, each reporting about once a second.
* LS3: every message comes from a different vehicle.
* GasSearch: distinct vehicles, all low on fuel, so every message is searched.
"""

from __future__ import annotations

import random
from dataclasses import dataclass, field
from typing import Optional

# rough bounding box of Germany, where the station corpus lives
REGION = (47.3, 5.9, 55.0, 15.0)
KINDS = ("ls1", "ls2", "ls3", "gas-search")


@dataclass(frozen=True)
class LoadScenario:
    kind: str
    n_vehicles: int = 1000  # only used by LS2
    fuel_range: tuple[float, float] = (5.0, 95.0)
    jitter_ms: int = 100  # LS2 timing jitter
    step_deg: float = 0.0005  # LS2 random-walk step per second

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown scenario {self.kind!r}; pick one of {', '.join(KINDS)}")
        if self.n_vehicles < 1:
            raise ValueError("LS2 needs at least one vehicle")

    @classmethod
    def named(cls, kind: str, n_vehicles: Optional[int] = None) -> "LoadScenario":
        kind = kind.lower()
        if kind == "gas-search":
            return cls(kind, fuel_range=(5.0, 45.0))
        if kind == "ls2":
            return cls(kind, n_vehicles=n_vehicles or 1000)
        return cls(kind)


@dataclass
class LoadGenerator:
    """Produces one virtual second of messages at a time.

    Timestamps of second ``tick`` lie in (tick*1000, tick*1000 + 1000], so
    they fall into that second's batch.
    """

    scenario: LoadScenario
    seed: int = 0
    _positions: dict = field(default_factory=dict)

    def _rng(self, *parts) -> random.Random:
        return random.Random(":".join(str(p) for p in (self.seed, self.scenario.kind) + parts))

    def _spot(self, rng: random.Random) -> tuple[float, float]:
        return rng.uniform(REGION[0], REGION[2]), rng.uniform(REGION[1], REGION[3])

    def _ls2_position(self, j: int, tick: int) -> tuple[float, float]:
        pos = self._positions.get(j)
        if pos is None:
            lat, lon = self._spot(self._rng("start", j))
            pos = self._positions[j] = [lat, lon, tick]
        rng = self._rng("walk", j, tick)
        while pos[2] < tick:
            pos[0] = min(REGION[2], max(REGION[0], pos[0] + rng.uniform(-1, 1) * self.scenario.step_deg))
            pos[1] = min(REGION[3], max(REGION[1], pos[1] + rng.uniform(-1, 1) * self.scenario.step_deg))
            pos[2] += 1
        return pos[0], pos[1]

    def messages(self, rate: int, tick: int) -> list[tuple[int, dict]]:
        """Exactly ``rate`` (timestamp, document) pairs for second ``tick``."""
        if rate <= 0:
            return []
        sc = self.scenario
        rng = self._rng("tick", tick)
        base = tick * 1000
        out = []
        for i in range(rate):
            offset = 1 + (i * 1000) // rate
            if sc.kind == "ls1":
                vid = "v1"
            elif sc.kind == "ls2":
                j = (tick * rate + i) % sc.n_vehicles
                vid = f"v2-{j}"
                offset = 1 + (j * 1000) // sc.n_vehicles if rate == sc.n_vehicles else offset
                offset = min(1000, max(1, offset + rng.randint(-sc.jitter_ms, sc.jitter_ms)))
            elif sc.kind == "ls3":
                vid = f"v3-{tick}-{i}"
            else:
                vid = f"vg-{tick}-{i}"
            if sc.kind == "ls2":
                lat, lon = self._ls2_position(int(vid[3:]), tick)
            else:
                lat, lon = self._spot(rng)
            fuel = round(rng.uniform(*sc.fuel_range), 1)
            ts = base + offset
            out.append((ts, {
                "altitude": round(rng.uniform(0, 500), 1),
                "latitude": round(lat, 6),
                "longitude": round(lon, 6),
                "readings": {"FUEL_LEVEL": f"{fuel}", "ENGINE_RPM": str(rng.randint(800, 4000))},
                "timestamp": ts,
                "vehicleid": vid,
            }))
        out.sort(key=lambda m: m[0])
        return out


def generate_messages(scenario: LoadScenario, rate: int, tick: int, seed: int = 0,
                      generator: Optional[LoadGenerator] = None) -> list[tuple[int, dict]]:
    """One virtual second of messages; pass a generator to keep LS2 walks going."""
    gen = generator or LoadGenerator(scenario, seed)
    return gen.messages(rate, tick)


@dataclass(frozen=True)
class RateSchedule:
    start_rate: int = 500
    step: int = 500
    max_rate: int = 10_000
    dwell_s: int = 30

    def __post_init__(self):
        if self.start_rate <= 0 or self.step <= 0 or self.dwell_s <= 0:
            raise ValueError("rates, step and dwell must be positive")
        if self.max_rate < self.start_rate:
            raise ValueError("max rate lies below the start rate")

    def rates(self) -> list[int]:
        return list(range(self.start_rate, self.max_rate + 1, self.step))


def random_stations(n: int, seed: int = 0):
    """A synthetic station corpus spread over the region."""
    from ..cis.model import GasStation
    rng = random.Random(f"{seed}:stations")
    return [GasStation(f"st{i:05d}", round(rng.uniform(REGION[0], REGION[2]), 6),
                       round(rng.uniform(REGION[1], REGION[3]), 6), f"Station {i}")
            for i in range(n)]


def random_price_events(stations, seed: int = 0, now_ms: int = 0, days: int = 10):
    """Daily price changes for every station over the last ``days`` days."""
    from ..cis.model import PriceEvent
    rng = random.Random(f"{seed}:prices")
    day = 86_400_000
    events = []
    for s in stations:
        for d in range(days, -1, -1):
            events.append(PriceEvent(s.station_id, "e5", round(rng.uniform(1.35, 1.75), 3),
                                     now_ms - d * day))
    return events
