"""Great-circle distance and conservative search boxes."""

from __future__ import annotations

import math

EARTH_RADIUS_KM = 6371.0


def haversine_km(lat1: float, lon1: float, lat2: float, lon2: float) -> float:
    p1, p2 = math.radians(lat1), math.radians(lat2)
    dp = p2 - p1
    dl = math.radians(lon2 - lon1)
    h = math.sin(dp / 2) ** 2 + math.cos(p1) * math.cos(p2) * math.sin(dl / 2) ** 2
    return 2 * EARTH_RADIUS_KM * math.asin(min(1.0, math.sqrt(h)))


def search_boxes(lat: float, lon: float, radius_km: float) -> list[tuple[float, float, float, float]]:
    """Lat/lon boxes (min_lat, min_lon, max_lat, max_lon) covering the circle.

    The boxes are slightly padded so float rounding never drops a point on
    the boundary.  Circles reaching a pole cover every longitude, and circles
    crossing the antimeridian are split in two.
    """
    ang = radius_km / EARTH_RADIUS_KM
    dlat = math.degrees(ang) + 1e-9
    lo_lat, hi_lat = lat - dlat, lat + dlat
    if hi_lat >= 90.0 or lo_lat <= -90.0 or ang >= math.pi / 2:
        return [(max(lo_lat, -90.0), -180.0, min(hi_lat, 90.0), 180.0)]
    # widest longitude extent of a small circle, reached off the centre latitude
    ratio = math.sin(ang) / math.cos(math.radians(lat))
    if ratio >= 1.0:
        return [(lo_lat, -180.0, hi_lat, 180.0)]
    dlon = math.degrees(math.asin(ratio)) + 1e-9
    lo_lon, hi_lon = lon - dlon, lon + dlon
    if lo_lon < -180.0:
        return [(lo_lat, lo_lon + 360.0, hi_lat, 180.0), (lo_lat, -180.0, hi_lat, hi_lon)]
    if hi_lon > 180.0:
        return [(lo_lat, lo_lon, hi_lat, 180.0), (lo_lat, -180.0, hi_lat, hi_lon - 360.0)]
    return [(lo_lat, lo_lon, hi_lat, hi_lon)]
