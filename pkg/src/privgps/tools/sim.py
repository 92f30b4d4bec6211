"""End-to-end population study: privatize known owners, then estimate them back."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from typing import IO, Sequence

import numpy as np

from privgps.estimator import conditional_stderr
from privgps.geo import GridSpec
from privgps.mechanisms import CoinPair, RandomSource, rr_counts
from privgps.tools.aggregate import CellRow, rows_from_counts

CSV_FIELDS = ["cell_index", "center_lat", "center_lon", "truth", "yes_count", "raw", "clamped",
              "stderr", "abs_error", "norm_error"]


@dataclass(frozen=True)
class SimCell:
    row: CellRow
    truth: int
    stderr: float  # given the known placement
    abs_error: float
    norm_error: float


def allocate(owners: int, dist: Sequence[float]) -> np.ndarray:
    """Deterministic per-cell owner counts by largest remainder; the rest are off-grid."""
    dist = np.asarray(dist, dtype=float)
    if dist.ndim != 1 or (dist < 0).any() or not np.isfinite(dist).all():
        raise ValueError("distribution must be non-negative proportions")
    if dist.sum() > 1 + 1e-9:
        raise ValueError(f"proportions sum to {dist.sum():.6g} > 1")
    exact = dist * owners
    counts = np.floor(exact).astype(np.int64)
    target = min(owners, int(round(exact.sum())))
    order = np.argsort(-(exact - counts), kind="stable")
    counts[order[: target - counts.sum()]] += 1
    return counts


def owner_cells(counts: np.ndarray, owners: int) -> np.ndarray:
    cells = np.repeat(np.arange(len(counts), dtype=np.int64), counts)
    return np.concatenate([cells, np.full(owners - len(cells), -1, dtype=np.int64)])


def simulate(owners: int, grid: GridSpec, dist: Sequence[float], coins: CoinPair, seed: int) -> list[SimCell]:
    if owners < 1:
        raise ValueError("owners must be positive")
    if len(dist) != grid.n_cells:
        raise ValueError(f"distribution has {len(dist)} entries, grid has {grid.n_cells} cells")
    truth = allocate(owners, dist)
    yes = rr_counts(owner_cells(truth, owners), grid.n_cells, coins, RandomSource(seed))
    out = []
    for row, t in zip(rows_from_counts(yes, owners, coins, grid), truth):
        se = conditional_stderr(owners, coins, int(t))
        err = abs(row.raw - t)
        if se > 0:
            norm = (row.raw - t) / se
        else:
            norm = 0.0 if err < 1e-9 else math.copysign(math.inf, row.raw - t)
        out.append(SimCell(row, int(t), se, err, norm))
    return out


def write_csv(cells: Sequence[SimCell], fh: IO[str]) -> None:
    w = csv.writer(fh, lineterminator="\n")
    w.writerow(CSV_FIELDS)
    for c in cells:
        r = c.row
        w.writerow([r.cell_index, r.center_lat, r.center_lon, c.truth, r.yes_count, r.raw, r.clamped,
                    c.stderr, c.abs_error, c.norm_error])
