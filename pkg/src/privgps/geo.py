"""Coordinate arithmetic and grid discretization of the location space.

Offsets use a local equirectangular approximation with 111,320 m per degree
of latitude. That is accurate at city scale; grids are capped at 100 km per
axis so the approximation stays valid.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

METERS_PER_DEG = 111_320.0
EARTH_RADIUS_M = 6_371_000.0
MAX_GRID_EXTENT_M = 100_000.0
POLAR_LIMIT_DEG = 89.0


class PolarRegion(ValueError):
    """Raised when a meter offset is requested at |lat| >= 89 degrees."""


class IndexOutOfRange(IndexError):
    pass


class _OutOfGrid:
    """Sentinel returned by :func:`cell_of` for points outside the grid."""

    _instance = None

    def __new__(cls):
        if cls._instance is None:
            cls._instance = super().__new__(cls)
        return cls._instance

    def __repr__(self) -> str:
        return "OutOfGrid"

    def __bool__(self) -> bool:
        return False


OutOfGrid = _OutOfGrid()


@dataclass(frozen=True)
class GeoPoint:
    lat_deg: float
    lon_deg: float

    def __post_init__(self) -> None:
        lat, lon = float(self.lat_deg), float(self.lon_deg)
        if not (-90.0 <= lat <= 90.0):
            raise ValueError(f"latitude {lat!r} outside [-90, 90]")
        if not (-180.0 <= lon <= 180.0):
            raise ValueError(f"longitude {lon!r} outside [-180, 180]")
        object.__setattr__(self, "lat_deg", lat)
        object.__setattr__(self, "lon_deg", lon)


@dataclass(frozen=True)
class GridSpec:
    """Row-major grid anchored at its southwest corner.

    Cell ``index = row * cols + col``; rows grow northward, columns eastward.
    Cells are half-open on their north and east edges.
    """

    origin: GeoPoint
    cell_size_m: float
    rows: int
    cols: int

    def __post_init__(self) -> None:
        if not (self.cell_size_m > 0 and math.isfinite(self.cell_size_m)):
            raise ValueError(f"cell_size_m must be positive, got {self.cell_size_m!r}")
        for name in ("rows", "cols"):
            v = getattr(self, name)
            if isinstance(v, bool) or not isinstance(v, (int, np.integer)) or v < 1:
                raise ValueError(f"{name} must be a positive integer, got {v!r}")
            object.__setattr__(self, name, int(v))
        if self.rows * self.cell_size_m > MAX_GRID_EXTENT_M or self.cols * self.cell_size_m > MAX_GRID_EXTENT_M:
            raise ValueError("grid extent exceeds 100 km on an axis")
        if abs(self.origin.lat_deg) >= POLAR_LIMIT_DEG:
            raise PolarRegion("grid origin in polar region")

    @property
    def n_cells(self) -> int:
        return self.rows * self.cols

    def to_dict(self) -> dict:
        return {
            "origin_lat": self.origin.lat_deg,
            "origin_lon": self.origin.lon_deg,
            "cell_size_m": self.cell_size_m,
            "rows": self.rows,
            "cols": self.cols,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "GridSpec":
        expected = {"origin_lat", "origin_lon", "cell_size_m", "rows", "cols"}
        extra = set(d) - expected
        missing = expected - set(d)
        if extra or missing:
            raise ValueError(f"grid fields: missing {sorted(missing)}, unknown {sorted(extra)}")
        for key in ("rows", "cols"):
            if isinstance(d[key], bool) or not isinstance(d[key], int):
                raise ValueError(f"grid {key} must be an integer")
        return cls(GeoPoint(d["origin_lat"], d["origin_lon"]), float(d["cell_size_m"]), d["rows"], d["cols"])


@dataclass(frozen=True)
class BoundingBox:
    """Closed lat/lon box used to gate where releases are permitted."""

    min_lat: float
    min_lon: float
    max_lat: float
    max_lon: float

    def __post_init__(self) -> None:
        GeoPoint(self.min_lat, self.min_lon)
        GeoPoint(self.max_lat, self.max_lon)
        if self.min_lat > self.max_lat or self.min_lon > self.max_lon:
            raise ValueError("bounding box min exceeds max")

    def contains(self, p: GeoPoint) -> bool:
        return self.min_lat <= p.lat_deg <= self.max_lat and self.min_lon <= p.lon_deg <= self.max_lon

    def to_dict(self) -> dict:
        return {"min_lat": self.min_lat, "min_lon": self.min_lon, "max_lat": self.max_lat, "max_lon": self.max_lon}

    @classmethod
    def from_dict(cls, d: dict) -> "BoundingBox":
        expected = {"min_lat", "min_lon", "max_lat", "max_lon"}
        if set(d) != expected:
            raise ValueError(f"allowed_region fields must be exactly {sorted(expected)}")
        return cls(*(float(d[k]) for k in ("min_lat", "min_lon", "max_lat", "max_lon")))


def meters_to_deg(north_m: float, east_m: float, at: GeoPoint) -> tuple[float, float]:
    """Convert a local (north, east) offset in meters to (dlat, dlon) in degrees."""
    if abs(at.lat_deg) >= POLAR_LIMIT_DEG:
        raise PolarRegion(f"latitude {at.lat_deg} too close to a pole")
    dlat = north_m / METERS_PER_DEG
    dlon = east_m / (METERS_PER_DEG * math.cos(math.radians(at.lat_deg)))
    return dlat, dlon


def offset_m(frm: GeoPoint, to: GeoPoint) -> tuple[float, float]:
    """Inverse of :func:`meters_to_deg`: (north, east) meters from ``frm`` to ``to``."""
    if abs(frm.lat_deg) >= POLAR_LIMIT_DEG:
        raise PolarRegion(f"latitude {frm.lat_deg} too close to a pole")
    north = (to.lat_deg - frm.lat_deg) * METERS_PER_DEG
    east = (to.lon_deg - frm.lon_deg) * METERS_PER_DEG * math.cos(math.radians(frm.lat_deg))
    return north, east


def displace(at: GeoPoint, north_m: float, east_m: float) -> GeoPoint:
    dlat, dlon = meters_to_deg(north_m, east_m, at)
    lon = at.lon_deg + dlon
    if lon > 180.0 or lon < -180.0:
        lon = (lon + 180.0) % 360.0 - 180.0
    return GeoPoint(at.lat_deg + dlat, lon)


def cell_of(p: GeoPoint, g: GridSpec):
    """Return the cell index containing ``p``, or :data:`OutOfGrid`."""
    north, east = offset_m(g.origin, p)
    # snap sub-nanometre round-off so points built on an edge land on it
    row = math.floor(round(north / g.cell_size_m, 9))
    col = math.floor(round(east / g.cell_size_m, 9))
    if not (0 <= row < g.rows and 0 <= col < g.cols):
        return OutOfGrid
    return row * g.cols + col


def _check_index(i: int, g: GridSpec) -> tuple[int, int]:
    if not (0 <= i < g.n_cells):
        raise IndexOutOfRange(f"cell {i} not in [0, {g.n_cells})")
    return divmod(i, g.cols)


def cell_center(i: int, g: GridSpec) -> GeoPoint:
    row, col = _check_index(i, g)
    return displace(g.origin, (row + 0.5) * g.cell_size_m, (col + 0.5) * g.cell_size_m)


def one_hot(i: int, g: GridSpec) -> np.ndarray:
    _check_index(i, g)
    v = np.zeros(g.n_cells, dtype=np.uint8)
    v[i] = 1
    return v


def haversine_m(a: GeoPoint, b: GeoPoint) -> float:
    lat1, lat2 = math.radians(a.lat_deg), math.radians(b.lat_deg)
    dlat = lat2 - lat1
    dlon = math.radians(b.lon_deg - a.lon_deg)
    h = math.sin(dlat / 2) ** 2 + math.cos(lat1) * math.cos(lat2) * math.sin(dlon / 2) ** 2
    return 2 * EARTH_RADIUS_M * math.asin(min(1.0, math.sqrt(h)))
