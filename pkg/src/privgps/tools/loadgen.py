"""Concurrent subscriber load against a running daemon.

Every client subscribes, then timestamps each REPORT until the run window
closes. A gap shorter than ``GAP_FRACTION`` of the applied epoch counts as a
violation of the release guarantee.
"""

from __future__ import annotations

import asyncio
import csv
import json
import statistics
from dataclasses import dataclass, field
from typing import IO, Sequence

GAP_FRACTION = 0.95

CSV_FIELDS = ["iteration", "client", "reports", "min_gap_ms", "mean_gap_ms", "max_gap_ms", "violations", "error"]


@dataclass
class ClientResult:
    client: int
    epoch_ms: int | None = None
    arrivals_ms: list[float] = field(default_factory=list)
    seqs: list[int] = field(default_factory=list)
    error: str | None = None

    @property
    def reports(self) -> int:
        return len(self.arrivals_ms)

    @property
    def gaps_ms(self) -> list[float]:
        a = self.arrivals_ms
        return [b - x for x, b in zip(a, a[1:])]

    @property
    def violations(self) -> int:
        if self.epoch_ms is None:
            return 0
        return sum(g < GAP_FRACTION * self.epoch_ms for g in self.gaps_ms)


@dataclass
class RunReport:
    clients: list[ClientResult]
    iteration: int = 0

    @property
    def served(self) -> list[ClientResult]:
        return [c for c in self.clients if c.error is None]

    @property
    def refusals(self) -> dict[str, int]:
        out: dict[str, int] = {}
        for c in self.clients:
            if c.error is not None:
                out[c.error] = out.get(c.error, 0) + 1
        return out

    @property
    def violations(self) -> int:
        return sum(c.violations for c in self.clients)

    def rows(self) -> list[list]:
        rows = []
        for c in self.clients:
            g = c.gaps_ms
            rows.append([
                self.iteration, c.client, c.reports,
                round(min(g), 3) if g else "", round(statistics.fmean(g), 3) if g else "",
                round(max(g), 3) if g else "", c.violations, c.error or "",
            ])
        return rows


async def run_client(
    client: int, host: str, port: int, app_id: str, epoch_ms: int | None, duration_ms: float,
    start: asyncio.Event | None = None,
) -> ClientResult:
    res = ClientResult(client)
    loop = asyncio.get_running_loop()
    try:
        reader, writer = await asyncio.open_connection(host, port)
    except OSError as exc:
        res.error = f"CONNECT:{exc.__class__.__name__}"
        return res
    try:
        sub = {"type": "SUBSCRIBE", "app_id": app_id}
        if epoch_ms is not None:
            sub["epoch_ms"] = epoch_ms
        if start is not None:
            await start.wait()
        try:
            writer.write((json.dumps(sub) + "\n").encode())
            await writer.drain()
        except ConnectionError:
            pass  # a refused connection may already be closed; its ERROR is still readable
        first = await reader.readline()
        if not first:
            res.error = "CLOSED"
            return res
        msg = json.loads(first)
        if msg.get("type") != "ACK":
            res.error = msg.get("code", msg.get("type", "UNKNOWN"))
            return res
        res.epoch_ms = msg["epoch_ms"]
        deadline = loop.time() + duration_ms / 1000.0
        while True:
            remaining = deadline - loop.time()
            if remaining <= 0:
                break
            try:
                line = await asyncio.wait_for(reader.readline(), remaining)
            except asyncio.TimeoutError:
                break
            if not line:
                res.error = "CLOSED"
                break
            msg = json.loads(line)
            if msg.get("type") == "REPORT":
                res.arrivals_ms.append(loop.time() * 1000.0)
                res.seqs.append(msg["seq"])
            elif msg.get("type") == "ACK":
                res.epoch_ms = msg["epoch_ms"]
    except (ConnectionError, json.JSONDecodeError) as exc:
        res.error = f"PROTOCOL:{exc.__class__.__name__}"
    finally:
        writer.close()
        try:
            await writer.wait_closed()
        except ConnectionError:
            pass
    return res


async def run_load(
    clients: int, epoch_ms: int | None, duration_ms: float, host: str = "127.0.0.1", port: int = 2948,
    app_id: str = "loadgen", iteration: int = 0,
) -> RunReport:
    """Connect ``clients`` sessions at once and record REPORT arrivals for ``duration_ms``."""
    start = asyncio.Event()
    tasks = [
        asyncio.create_task(run_client(i, host, port, app_id, epoch_ms, duration_ms, start))
        for i in range(clients)
    ]
    # let every connection be admitted (or refused) before anyone subscribes
    await asyncio.sleep(0.2)
    start.set()
    results = await asyncio.gather(*tasks)
    return RunReport(list(results), iteration)


def mean_reports(reports: Sequence[RunReport]) -> float:
    counts = [c.reports for r in reports for c in r.served]
    return statistics.fmean(counts) if counts else 0.0


def write_csv(reports: Sequence[RunReport], fh: IO[str]) -> None:
    w = csv.writer(fh, lineterminator="\n")
    w.writerow(CSV_FIELDS)
    for r in reports:
        w.writerows(r.rows())
