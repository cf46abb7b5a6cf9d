"""Cheapest-station recommendation with a history gate and low-fuel override."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Any, Optional, Protocol, Union

from .model import FUEL_KINDS, VehicleReading
from .prices import NoHistory, PriceHistory, historical_average
from .rtree import StationIndex

# absorbs float noise in the weighted mean when the price equals it
PRICE_EPSILON = 1e-9


@dataclass(frozen=True)
class RecommenderConfig:
    radius_km: float = 10.0
    fuel_threshold_pct: float = 50.0
    critical_fuel_pct: float = 20.0
    tank_capacity_l: float = 50.0
    consumption_l_per_km: float = 0.07
    lookback_days: float = 7.0
    price_cache_ttl_s: float = 300.0
    trip_gap_min: float = 30.0
    fuel_kind: str = "e5"

    def __post_init__(self):
        numbers = (self.radius_km, self.fuel_threshold_pct, self.critical_fuel_pct,
                   self.tank_capacity_l, self.consumption_l_per_km, self.lookback_days,
                   self.price_cache_ttl_s, self.trip_gap_min)
        if any(not v > 0 for v in numbers):
            raise ValueError("recommender settings must be positive")
        if self.critical_fuel_pct >= self.fuel_threshold_pct:
            raise ValueError("critical fuel level must lie below the filter threshold")
        if self.fuel_kind not in FUEL_KINDS:
            raise ValueError(f"unknown fuel kind {self.fuel_kind!r}")

    @property
    def trip_gap_ms(self) -> int:
        return int(self.trip_gap_min * 60_000)


@dataclass(frozen=True)
class Recommendation:
    vehicle_id: str
    station_id: str
    distance_km: float
    price_per_liter: float
    expected_fill_cost: float
    reason: str  # "good_price" or "low_fuel"
    timestamp: int = 0


@dataclass(frozen=True)
class NoRecommendation:
    vehicle_id: str
    reason: str  # "no_station", "no_price" or "wait_for_drop"
    timestamp: int = 0


Outcome = Union[Recommendation, NoRecommendation]


class PriceLookup(Protocol):
    def current_price(self, station_id: str, fuel_kind: str, now_ms: int) -> float: ...


@dataclass
class RecommendContext:
    index: StationIndex
    prices: PriceLookup
    history: PriceHistory
    config: RecommenderConfig = RecommenderConfig()


def refill_liters(fuel_pct: float, cfg: RecommenderConfig) -> float:
    return cfg.tank_capacity_l * (1.0 - fuel_pct / 100.0)


def fill_cost(price: float, distance_km: float, fuel_pct: float, cfg: RecommenderConfig) -> float:
    """Refill cost plus the fuel burnt on the one-way detour, both at ``price``."""
    return price * refill_liters(fuel_pct, cfg) + distance_km * cfg.consumption_l_per_km * price


def recommend_station(reading: VehicleReading, rctx: RecommendContext) -> Outcome:
    cfg = rctx.config
    fuel = reading.fuel_level
    if fuel is None:
        raise ValueError("recommendation needs a fuel level; filter the reading first")
    now = reading.timestamp
    candidates = rctx.index.nearby(reading.latitude, reading.longitude, cfg.radius_km)
    if not candidates:
        return NoRecommendation(reading.vehicle_id, "no_station", now)
    best: Optional[tuple] = None
    for station, dist in candidates:
        try:
            p = rctx.prices.current_price(station.station_id, cfg.fuel_kind, now)
        except Exception:  # unreachable or unknown station: skip the candidate
            continue
        key = (fill_cost(p, dist, fuel, cfg), dist, station.station_id)
        if best is None or key < best[0]:
            best = (key, p)
    if best is None:
        return NoRecommendation(reading.vehicle_id, "no_price", now)
    (total, dist, sid), price = best
    try:
        stats = historical_average(rctx.history, sid, cfg.fuel_kind, cfg.lookback_days, now)
        good = price <= stats.mean + PRICE_EPSILON
    except NoHistory:
        good = False  # nothing to compare with; only the low-fuel override can fire
    if good:
        reason = "good_price"
    elif fuel <= cfg.critical_fuel_pct:
        reason = "low_fuel"
    else:
        return NoRecommendation(reading.vehicle_id, "wait_for_drop", now)
    return Recommendation(reading.vehicle_id, sid, dist, price, total, reason, now)


def as_push_message(rec: Recommendation) -> dict[str, Any]:
    return {"vehicleid": rec.vehicle_id, "station_id": rec.station_id,
            "price": rec.price_per_liter, "expected_cost": round(rec.expected_fill_cost, 4)}
