"""Sort-tile-recursive packed R-tree over station positions.

The tree is built once and never mutated, so it can be shipped to workers
as a broadcast value.  ``visits`` counts touched nodes plus every entry
of each leaf that was scanned; it backs the sub-linear query check.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Iterable, Optional

from .geo import haversine_km, search_boxes
from .model import GasStation, valid_coordinates

NODE_CAPACITY = 16


class DuplicateStationId(ValueError):
    pass


@dataclass
class _Node:
    box: tuple[float, float, float, float]  # min_lat, min_lon, max_lat, max_lon
    children: list  # _Node or GasStation
    leaf: bool


def _bbox_points(items: list[GasStation]) -> tuple[float, float, float, float]:
    lats = [s.latitude for s in items]
    lons = [s.longitude for s in items]
    return min(lats), min(lons), max(lats), max(lons)


def _bbox_nodes(nodes: list[_Node]) -> tuple[float, float, float, float]:
    return (min(n.box[0] for n in nodes), min(n.box[1] for n in nodes),
            max(n.box[2] for n in nodes), max(n.box[3] for n in nodes))


def _str_pack(items: list, key_x, key_y, capacity: int) -> list[list]:
    """Group items into runs of ``capacity`` by vertical slices, then rows."""
    n = len(items)
    leaves = math.ceil(n / capacity)
    slices = max(1, math.ceil(math.sqrt(leaves)))
    per_slice = slices * capacity
    groups = []
    by_x = sorted(items, key=key_x)
    for i in range(0, n, per_slice):
        run = sorted(by_x[i:i + per_slice], key=key_y)
        groups.extend(run[j:j + capacity] for j in range(0, len(run), capacity))
    return groups


def _intersects(a, b) -> bool:
    return a[0] <= b[2] and b[0] <= a[2] and a[1] <= b[3] and b[1] <= a[3]


class StationIndex:
    _built = 0  # process-wide build counter

    def __init__(self, stations: Iterable[GasStation], capacity: int = NODE_CAPACITY):
        items = list(stations)
        seen = set()
        for s in items:
            if s.station_id in seen:
                raise DuplicateStationId(s.station_id)
            if not valid_coordinates(s.latitude, s.longitude):
                raise ValueError(f"station {s.station_id} has invalid coordinates")
            seen.add(s.station_id)
        self.n = len(items)
        self.capacity = capacity
        self.root: Optional[_Node] = self._build(items) if items else None
        self.visits = 0
        self.queries = 0
        StationIndex._built += 1

    @classmethod
    def build_count(cls) -> int:
        return cls._built

    def _build(self, items: list[GasStation]) -> _Node:
        level = [_Node(_bbox_points(g), g, True)
                 for g in _str_pack(items, lambda s: s.longitude, lambda s: s.latitude,
                                    self.capacity)]
        while len(level) > 1:
            level = [_Node(_bbox_nodes(g), g, False)
                     for g in _str_pack(level, lambda n: n.box[1] + n.box[3],
                                        lambda n: n.box[0] + n.box[2], self.capacity)]
        return level[0]

    def __len__(self) -> int:
        return self.n

    def __getstate__(self):
        state = dict(self.__dict__)
        state["visits"] = 0
        state["queries"] = 0
        return state

    def nearby(self, lat: float, lon: float, radius_km: float) -> list[tuple[GasStation, float]]:
        """Stations within ``radius_km``, nearest first, ties by station id."""
        if radius_km < 0:
            raise ValueError("radius must be non-negative")
        self.queries += 1
        if self.root is None:
            return []
        found: dict[str, tuple[GasStation, float]] = {}
        for box in search_boxes(lat, lon, radius_km):
            stack = [self.root]
            while stack:
                node = stack.pop()
                self.visits += 1
                if not _intersects(node.box, box):
                    continue
                if node.leaf:
                    self.visits += len(node.children)
                    for s in node.children:
                        if s.station_id in found:
                            continue
                        if not (box[0] <= s.latitude <= box[2] and box[1] <= s.longitude <= box[3]):
                            continue
                        d = haversine_km(lat, lon, s.latitude, s.longitude)
                        if d <= radius_km:
                            found[s.station_id] = (s, d)
                else:
                    stack.extend(node.children)
        return sorted(found.values(), key=lambda sd: (sd[1], sd[0].station_id))


def build_station_index(stations: Iterable[GasStation]) -> StationIndex:
    return StationIndex(stations)


def nearby_stations(index: StationIndex, lat: float, lon: float,
                    radius_km: float) -> list[tuple[GasStation, float]]:
    return index.nearby(lat, lon, radius_km)


def linear_scan(stations: Iterable[GasStation], lat: float, lon: float,
                radius_km: float) -> list[tuple[GasStation, float]]:
    """Reference answer: check every station."""
    hits = []
    for s in stations:
        d = haversine_km(lat, lon, s.latitude, s.longitude)
        if d <= radius_km:
            hits.append((s, d))
    return sorted(hits, key=lambda sd: (sd[1], sd[0].station_id))
