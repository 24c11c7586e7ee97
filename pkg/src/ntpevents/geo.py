"""Geographic footprint of affected clients: pluggable geolocation + convex hull."""

from __future__ import annotations

import csv
import ipaddress
import os
from dataclasses import dataclass, field
from typing import Iterable, Protocol


class ProviderUnavailable(RuntimeError):
    pass


class GeoProvider(Protocol):
    def locate(self, ip: str) -> tuple[float, float] | None: ...


class TableGeoProvider:
    """Offline ``ip,lat,lon`` table."""

    def __init__(self, path: str | os.PathLike):
        self.path = path
        self._table: dict[str, tuple[float, float]] | None = None

    def _load(self) -> dict[str, tuple[float, float]]:
        if self._table is None:
            try:
                with open(self.path, newline="") as fh:
                    table = {}
                    for row in csv.reader(fh):
                        if len(row) < 3 or row[0].strip().lower() == "ip":
                            continue
                        ip = str(ipaddress.ip_address(row[0].strip()))
                        table[ip] = (float(row[1]), float(row[2]))
            except OSError as exc:
                raise ProviderUnavailable(f"geolocation table {self.path}: {exc}") from exc
            self._table = table
        return self._table

    def locate(self, ip: str) -> tuple[float, float] | None:
        return self._load().get(str(ipaddress.ip_address(ip)))


def geolocate(ips: Iterable[str], provider: GeoProvider) -> tuple[list[tuple[str, float, float]], int]:
    """Returns (points as (ip, lat, lon), number of unresolvable IPs)."""
    points, skipped = [], 0
    for ip in ips:
        hit = provider.locate(ip)
        if hit is None:
            skipped += 1
        else:
            points.append((ip, hit[0], hit[1]))
    return points, skipped


def _cross(o, a, b) -> float:
    return (a[0] - o[0]) * (b[1] - o[1]) - (a[1] - o[1]) * (b[0] - o[0])


def convex_hull(points: Iterable[tuple[float, float]]) -> list[tuple[float, float]]:
    """Monotone chain. Counterclockwise, starting at the lowest-x (then lowest-y) point.

    One distinct point gives itself; collinear input gives its two extremes.
    """
    pts = sorted(set((float(x), float(y)) for x, y in points))
    if len(pts) <= 2:
        return pts
    lower: list[tuple[float, float]] = []
    for p in pts:
        while len(lower) >= 2 and _cross(lower[-2], lower[-1], p) <= 0:
            lower.pop()
        lower.append(p)
    upper: list[tuple[float, float]] = []
    for p in reversed(pts):
        while len(upper) >= 2 and _cross(upper[-2], upper[-1], p) <= 0:
            upper.pop()
        upper.append(p)
    return lower[:-1] + upper[:-1]


@dataclass
class GeoFootprint:
    prefix: str
    points: list[tuple[str, float, float]] = field(default_factory=list)
    hull: list[tuple[float, float]] = field(default_factory=list)  # (lon, lat)
    skipped: int = 0

    def to_geojson(self) -> dict:
        features = [
            {"type": "Feature", "properties": {"prefix": self.prefix, "ip": ip},
             "geometry": {"type": "Point", "coordinates": [lon, lat]}}
            for ip, lat, lon in self.points
        ]
        if len(self.hull) >= 3:
            ring = [list(p) for p in self.hull] + [list(self.hull[0])]
            geom = {"type": "Polygon", "coordinates": [ring]}
        elif len(self.hull) == 2:
            geom = {"type": "LineString", "coordinates": [list(p) for p in self.hull]}
        elif self.hull:
            geom = {"type": "Point", "coordinates": list(self.hull[0])}
        else:
            geom = None
        if geom is not None:
            features.append({"type": "Feature", "properties": {"prefix": self.prefix, "hull": True},
                             "geometry": geom})
        return {"type": "FeatureCollection", "features": features}


def footprint(prefix: str, ips: Iterable[str], provider: GeoProvider) -> GeoFootprint:
    points, skipped = geolocate(ips, provider)
    return GeoFootprint(prefix, points, convex_hull((lon, lat) for _, lat, lon in points), skipped)
