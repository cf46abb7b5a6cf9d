"""Vehicle, station and price records plus the vehicle-message decoder."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from typing import Any, Optional, Union

FUEL_KINDS = ("e5", "e10", "diesel")


@dataclass(frozen=True)
class VehicleReading:
    vehicle_id: str
    timestamp: int
    latitude: float
    longitude: float
    altitude: Optional[float] = None
    readings: dict = field(default_factory=dict, compare=False, hash=False)
    message_id: Optional[str] = None

    @property
    def fuel_level(self) -> Optional[float]:
        """FUEL_LEVEL as a percentage, or None when absent or unreadable."""
        raw = self.readings.get("FUEL_LEVEL")
        return parse_fuel_level(raw) if raw is not None else None

    def to_json(self) -> str:
        doc = {"altitude": self.altitude, "latitude": self.latitude,
               "longitude": self.longitude, "readings": dict(self.readings),
               "timestamp": self.timestamp, "vehicleid": self.vehicle_id}
        return json.dumps(doc, sort_keys=True)


@dataclass(frozen=True)
class GasStation:
    station_id: str
    latitude: float
    longitude: float
    name: str = ""


@dataclass(frozen=True)
class PriceEvent:
    station_id: str
    fuel_kind: str
    price: float
    effective_from: int

    def __post_init__(self):
        if self.fuel_kind not in FUEL_KINDS:
            raise ValueError(f"unknown fuel kind {self.fuel_kind!r}")
        if not self.price > 0:
            raise ValueError(f"price must be positive, got {self.price}")


@dataclass(frozen=True)
class DeadLetter:
    reason: str
    payload: bytes
    message_id: Optional[str] = None

    def to_json(self) -> str:
        return json.dumps({"reason": self.reason, "message_id": self.message_id,
                           "payload": self.payload.decode("utf-8", "replace")})


def parse_fuel_level(raw: Any) -> Optional[float]:
    """Dot-decimal string with an optional trailing ``%``; None if unreadable."""
    if isinstance(raw, bool):
        return None
    if isinstance(raw, (int, float)):
        value = float(raw)
    else:
        text = str(raw).strip()
        if text.endswith("%"):
            text = text[:-1].rstrip()
        if not text or "," in text:
            return None
        try:
            value = float(text)
        except ValueError:
            return None
    return value if math.isfinite(value) else None


def valid_coordinates(lat: float, lon: float) -> bool:
    return -90.0 <= lat <= 90.0 and -180.0 <= lon <= 180.0


def _number(doc: dict, key: str, required: bool = True) -> Optional[float]:
    if key not in doc or doc[key] is None:
        if required:
            raise ValueError(f"missing {key}")
        return None
    value = doc[key]
    if isinstance(value, bool) or not isinstance(value, (int, float)):
        raise ValueError(f"{key} is not a number")
    if not math.isfinite(value):
        raise ValueError(f"{key} is not finite")
    return float(value)


def parse_vehicle_reading(payload: Union[bytes, str],
                          message_id: Optional[str] = None) -> Union[VehicleReading, DeadLetter]:
    """Decode one vehicle message; anything invalid comes back as a DeadLetter."""
    raw = payload.encode("utf-8") if isinstance(payload, str) else bytes(payload)
    try:
        doc = json.loads(raw.decode("utf-8"))
        if not isinstance(doc, dict):
            raise ValueError("document is not an object")
        vid = doc.get("vehicleid")
        if not isinstance(vid, str) or not vid:
            raise ValueError("missing vehicleid")
        ts = doc.get("timestamp")
        if isinstance(ts, bool) or not isinstance(ts, int):
            raise ValueError("timestamp is not an integer")
        lat = _number(doc, "latitude")
        lon = _number(doc, "longitude")
        if not -90.0 <= lat <= 90.0:
            raise ValueError(f"latitude {lat} out of range")
        if not -180.0 <= lon <= 180.0:
            raise ValueError(f"longitude {lon} out of range")
        alt = _number(doc, "altitude", required=False)
        readings = doc.get("readings") or {}
        if not isinstance(readings, dict):
            raise ValueError("readings is not an object")
        readings = {str(k): str(v) for k, v in readings.items() if v is not None}
        fuel = readings.get("FUEL_LEVEL")
        if fuel is not None:
            level = parse_fuel_level(fuel)
            if level is not None and not 0.0 <= level <= 100.0:
                raise ValueError(f"FUEL_LEVEL {level} out of range")
    except (ValueError, UnicodeDecodeError) as exc:
        return DeadLetter(str(exc), raw, message_id)
    return VehicleReading(vid, ts, lat, lon, alt, readings, message_id)
