"""Sum privatized grid bit-vectors and invert the channel per cell."""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass
from typing import IO, Iterable, Sequence

import numpy as np

from privgps.estimator import AggregateCount, estimate_vector
from privgps.geo import GeoPoint, GridSpec, cell_center
from privgps.mechanisms import CoinPair

CSV_FIELDS = ["cell_index", "center_lat", "center_lon", "yes_count", "raw", "clamped", "stderr"]


class EmptyInput(ValueError):
    pass


class DimensionMismatch(ValueError):
    pass


@dataclass(frozen=True)
class CellRow:
    cell_index: int
    center_lat: float
    center_lon: float
    yes_count: int
    raw: float
    clamped: float
    stderr: float

    def as_row(self) -> list:
        return [self.cell_index, self.center_lat, self.center_lon, self.yes_count, self.raw, self.clamped, self.stderr]


def parse_grid(text: str) -> GridSpec:
    """Parse ``<rows>x<cols>:<cell_m>@<lat>,<lon>``, e.g. ``3x3:1000@34.05,-118.45``."""
    try:
        dims, rest = text.split(":", 1)
        rows, cols = dims.lower().split("x")
        cell, origin = rest.split("@")
        lat, lon = origin.split(",")
        return GridSpec(GeoPoint(float(lat), float(lon)), float(cell), int(rows), int(cols))
    except ValueError as exc:
        raise ValueError(f"bad grid spec {text!r} (want ROWSxCOLS:CELL_M@LAT,LON): {exc}") from None


def read_records(lines: Iterable[str]) -> list[list[int]]:
    records = []
    for lineno, line in enumerate(lines, 1):
        if not line.strip():
            continue
        try:
            rec = json.loads(line)
        except json.JSONDecodeError as exc:
            raise ValueError(f"line {lineno}: {exc}") from None
        cells = rec.get("cells") if isinstance(rec, dict) else None
        if not isinstance(cells, list) or any(b not in (0, 1) or isinstance(b, float) for b in cells):
            raise ValueError(f"line {lineno}: 'cells' must be a list of 0/1")
        records.append(cells)
    return records


def aggregate(records: Sequence[Sequence[int]], coins: CoinPair, grid: GridSpec) -> list[CellRow]:
    if len(records) == 0:
        raise EmptyInput("no response records")
    bits = np.zeros((len(records), grid.n_cells), dtype=np.int64)
    for i, rec in enumerate(records):
        if len(rec) != grid.n_cells:
            raise DimensionMismatch(f"record {i} has {len(rec)} cells, grid has {grid.n_cells}")
        bits[i] = rec
    return rows_from_counts(bits.sum(axis=0), len(records), coins, grid)


def rows_from_counts(yes_counts, n: int, coins: CoinPair, grid: GridSpec) -> list[CellRow]:
    estimates = estimate_vector([AggregateCount(int(y), n) for y in yes_counts], coins)
    rows = []
    for i, (y, est) in enumerate(zip(yes_counts, estimates)):
        c = cell_center(i, grid)
        rows.append(CellRow(i, c.lat_deg, c.lon_deg, int(y), est.raw, est.clamped, est.stderr))
    return rows


def write_csv(rows: Sequence[CellRow], fh: IO[str]) -> None:
    w = csv.writer(fh, lineterminator="\n")
    w.writerow(CSV_FIELDS)
    for r in rows:
        w.writerow(r.as_row())
