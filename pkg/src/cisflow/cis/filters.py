"""Fuel-level and first-appearance (once per trip) filters."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

from .model import VehicleReading


def fuel_below_threshold(reading: VehicleReading, threshold_pct: float = 50.0) -> bool:
    """Strictly below the threshold; readings without a usable level fail."""
    level = reading.fuel_level
    return level is not None and level < threshold_pct


@dataclass(frozen=True)
class TripState:
    last_seen: int
    passed: tuple = ()  # readings let through by the latest update only


def _order(r: VehicleReading):
    return (r.timestamp, r.message_id or "")


def trip_update(readings: list[VehicleReading], old: Optional[TripState],
                trip_gap_ms: int) -> TripState:
    """Advance one vehicle's trip state over a batch of its readings.

    A reading passes when there is no previous sighting or the previous one
    is more than ``trip_gap_ms`` older.  ``last_seen`` never moves backwards.
    """
    last = old.last_seen if old is not None else None
    passed = []
    for r in sorted(readings, key=_order):
        if last is None or r.timestamp - last > trip_gap_ms:
            passed.append(r)
        last = r.timestamp if last is None else max(last, r.timestamp)
    return TripState(last, tuple(passed))


def first_appearances(readings: list[VehicleReading], trip_gap_ms: int,
                      states: Optional[dict] = None) -> list[VehicleReading]:
    """Sequential version of the trip rule, used by the one-shot runner."""
    states = {} if states is None else states
    out = []
    by_vehicle: dict[str, list] = {}
    for r in readings:
        by_vehicle.setdefault(r.vehicle_id, []).append(r)
    for vid, rs in by_vehicle.items():
        st = trip_update(rs, states.get(vid), trip_gap_ms)
        states[vid] = st
        out.extend(st.passed)
    return sorted(out, key=_order)
