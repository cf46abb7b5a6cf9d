"""CSV loaders and immutable-store ingestion for stations and prices."""

from __future__ import annotations

import csv
from datetime import datetime, timezone
from pathlib import Path
from typing import Iterable, Union

from ..theta.store import ImmutableStore
from .model import GasStation, PriceEvent

STATION_HEADER = ["station_id", "name", "latitude", "longitude"]
PRICE_HEADER = ["station_id", "fuel", "price", "effective_from"]


class CsvFormatError(ValueError):
    pass


def parse_iso_utc(text: str) -> int:
    """ISO-8601 timestamp to epoch ms; naive values are taken as UTC."""
    t = text.strip()
    if t.endswith("Z"):
        t = t[:-1] + "+00:00"
    dt = datetime.fromisoformat(t)
    if dt.tzinfo is None:
        dt = dt.replace(tzinfo=timezone.utc)
    return int(round(dt.timestamp() * 1000))


def format_iso_utc(ms: int) -> str:
    return datetime.fromtimestamp(ms / 1000, tz=timezone.utc).strftime("%Y-%m-%dT%H:%M:%SZ")


def _rows(path: Union[str, Path], header: list[str]) -> Iterable[tuple[int, dict]]:
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames != header:
            raise CsvFormatError(f"{path}: expected header {','.join(header)}, "
                                 f"got {','.join(reader.fieldnames or [])}")
        for lineno, row in enumerate(reader, start=2):
            yield lineno, row


def load_stations_csv(path: Union[str, Path]) -> list[GasStation]:
    out = []
    for lineno, row in _rows(path, STATION_HEADER):
        try:
            out.append(GasStation(row["station_id"], float(row["latitude"]),
                                  float(row["longitude"]), row["name"]))
        except (TypeError, ValueError) as exc:
            raise CsvFormatError(f"{path}:{lineno}: {exc}") from None
    return out


def load_prices_csv(path: Union[str, Path]) -> list[PriceEvent]:
    out = []
    for lineno, row in _rows(path, PRICE_HEADER):
        try:
            out.append(PriceEvent(row["station_id"], row["fuel"], float(row["price"]),
                                  parse_iso_utc(row["effective_from"])))
        except (TypeError, ValueError) as exc:
            raise CsvFormatError(f"{path}:{lineno}: {exc}") from None
    return out


def write_stations_csv(path: Union[str, Path], stations: Iterable[GasStation]) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(STATION_HEADER)
        for s in stations:
            w.writerow([s.station_id, s.name, repr(s.latitude), repr(s.longitude)])


def write_prices_csv(path: Union[str, Path], events: Iterable[PriceEvent]) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(PRICE_HEADER)
        for e in events:
            w.writerow([e.station_id, e.fuel_kind, repr(e.price), format_iso_utc(e.effective_from)])


def ingest_stations(store: ImmutableStore, stations: Iterable[GasStation]) -> int:
    n = 0
    for s in stations:
        store.append("stations", {"station_id": s.station_id, "name": s.name,
                                  "latitude": s.latitude, "longitude": s.longitude})
        n += 1
    return n


def ingest_prices(store: ImmutableStore, events: Iterable[PriceEvent]) -> int:
    n = 0
    for e in events:
        store.append("prices", {"station_id": e.station_id, "fuel": e.fuel_kind,
                                "price": e.price, "effective_from": e.effective_from})
        n += 1
    return n


def stations_from_store(store: ImmutableStore) -> list[GasStation]:
    return [GasStation(r["station_id"], r["latitude"], r["longitude"], r.get("name", ""))
            for r in (rec.payload for rec in store.scan("stations"))]


def prices_from_store(store: ImmutableStore) -> list[PriceEvent]:
    return [PriceEvent(r["station_id"], r["fuel"], r["price"], r["effective_from"])
            for r in (rec.payload for rec in store.scan("prices"))]
