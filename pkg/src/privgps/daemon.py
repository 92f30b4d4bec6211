"""Loopback TCP service releasing one privatized report per client per epoch.

Each connection subscribes with an application id. The id is resolved
against the policy store, the request is clamped, and a per-session task
pushes a REPORT at ``subscribe_time + k * epoch`` for k = 1, 2, ... Raw fix
coordinates never leave the process: every outbound location goes through
``radius_privatize`` or ``rr_vector`` first.
"""

from __future__ import annotations

import asyncio
import collections
import ipaddress
import logging
import time
from dataclasses import dataclass, field

from privgps import protocol
from privgps.geo import OutOfGrid, cell_of, one_hot
from privgps.gps_source import Fix
from privgps.mechanisms import RandomSource, radius_privatize, rr_vector
from privgps.policy import DeniedByPolicy, EffectiveConfig, PolicyStore, SubscribeRequest, clamp, reload, resolve

log = logging.getLogger(__name__)

DEFAULT_MAX_CLIENTS = 64
MAX_VIOLATIONS_PER_EPOCH = 3
STALE_EPOCHS = 2


@dataclass
class ClientSession:
    app_id: str
    request: SubscribeRequest
    effective: EffectiveConfig
    rng: RandomSource
    next_release_ms: float
    epoch_seq: int = 0
    store_version: int = 0
    violations: collections.deque = field(default_factory=collections.deque)

    def tick(self, fix: Fix | None, fix_age_ms: float | None, wall_ms: int) -> dict | None:
        """Produce this epoch's REPORT (or ``None`` when gated) and advance the schedule."""
        cfg = self.effective
        self.next_release_ms += cfg.epoch_ms
        if fix is None or fix_age_ms is None or fix_age_ms > STALE_EPOCHS * cfg.epoch_ms:
            self.epoch_seq += 1
            return {"type": "REPORT", "seq": self.epoch_seq, "mode": "stale", "ts_ms": wall_ms}
        if cfg.allowed_region is not None and not cfg.allowed_region.contains(fix.point):
            return None
        if cfg.mode == "radius":
            out = radius_privatize(fix.point, cfg.radius_m, self.rng)
            payload = {"lat": out.lat_deg, "lon": out.lon_deg}
        else:
            cell = cell_of(fix.point, cfg.grid)
            if cell is OutOfGrid:
                truth = [0] * cfg.grid.n_cells
            else:
                truth = one_hot(cell, cfg.grid)
            payload = {"cells": rr_vector(truth, cfg.coins, self.rng).tolist()}
        self.epoch_seq += 1
        return {"type": "REPORT", "seq": self.epoch_seq, "mode": cfg.mode, **payload, "ts_ms": wall_ms}

    def record_violation(self, now_ms: float) -> int:
        """Count a rate-limit violation; returns violations within the last epoch."""
        window = self.effective.epoch_ms
        self.violations.append(now_ms)
        while self.violations and self.violations[0] <= now_ms - window:
            self.violations.popleft()
        return len(self.violations)


def _is_loopback(host: str) -> bool:
    if host == "localhost":
        return True
    try:
        return ipaddress.ip_address(host).is_loopback
    except ValueError:
        return False


class LocationDaemon:
    def __init__(
        self,
        store: PolicyStore,
        source,
        *,
        host: str = "127.0.0.1",
        port: int = protocol.DEFAULT_PORT,
        seed: int | None = None,
        max_clients: int = DEFAULT_MAX_CLIENTS,
        policy_path: str | None = None,
    ):
        if not _is_loopback(host):
            raise ValueError(f"refusing to bind non-loopback address {host!r}")
        if max_clients < 1:
            raise ValueError("max_clients must be positive")
        self.store = store
        self.store_version = 0
        self.source = source
        self.host = host
        self.port = port
        self.seed = seed
        self.max_clients = max_clients
        self.policy_path = policy_path
        self.latest_fix: Fix | None = None
        self._latest_fix_ms: float | None = None
        self._session_counter = 0
        self._connections: dict[asyncio.StreamWriter, asyncio.Task] = {}
        self._server: asyncio.AbstractServer | None = None
        self._source_task: asyncio.Task | None = None
        self._stopped = asyncio.Event()

    # clocks are monotonic for scheduling, wall-clock only for ts_ms
    @staticmethod
    def _now_ms() -> float:
        return asyncio.get_running_loop().time() * 1000.0

    @property
    def n_connections(self) -> int:
        return len(self._connections)

    async def start(self) -> None:
        self._server = await asyncio.start_server(
            self._on_connect, self.host, self.port, limit=protocol.MAX_LINE_BYTES
        )
        self.port = self._server.sockets[0].getsockname()[1]
        self._source_task = asyncio.create_task(self._pump_source())
        log.info("listening on %s:%d (max %d clients)", self.host, self.port, self.max_clients)

    async def _pump_source(self) -> None:
        try:
            async for fix in self.source.stream():
                self.latest_fix = fix
                self._latest_fix_ms = self._now_ms()
        except asyncio.CancelledError:
            raise
        except Exception:  # noqa: BLE001
            log.exception("fix source failed; sessions will report stale")
        else:
            log.info("fix source exhausted")

    async def serve_forever(self) -> None:
        await self._stopped.wait()

    async def stop(self) -> None:
        if self._server is not None:
            self._server.close()
        if self._source_task is not None:
            self._source_task.cancel()
        for writer, task in list(self._connections.items()):
            task.cancel()
            writer.close()
        tasks = list(self._connections.values())
        if tasks:
            await asyncio.gather(*tasks, return_exceptions=True)
        if self._server is not None:
            await self._server.wait_closed()
        self._stopped.set()

    def reload_policies(self, document: bytes | str | None = None) -> bool:
        """Swap in a new policy store; the old one stays on any error."""
        try:
            if document is None:
                with open(self.policy_path, "rb") as fh:
                    document = fh.read()
            store = reload(self.store, document)
        except (OSError, ValueError) as exc:
            log.error("policy reload rejected, keeping previous policies: %s", exc)
            return False
        self.store = store
        self.store_version += 1
        log.info("policies reloaded (version %d)", self.store_version)
        return True

    async def _send(self, writer: asyncio.StreamWriter, msg: dict) -> None:
        writer.write(protocol.encode(msg))
        await writer.drain()

    async def _on_connect(self, reader: asyncio.StreamReader, writer: asyncio.StreamWriter) -> None:
        if len(self._connections) >= self.max_clients:
            try:
                await self._send(writer, protocol.error("CAPACITY", f"limit of {self.max_clients} clients reached"))
            except ConnectionError:
                pass
            writer.close()
            return
        task = asyncio.current_task()
        self._connections[writer] = task
        try:
            await self._serve_connection(reader, writer)
        except (ConnectionError, asyncio.IncompleteReadError):
            pass
        finally:
            self._connections.pop(writer, None)
            writer.close()

    async def _serve_connection(self, reader: asyncio.StreamReader, writer: asyncio.StreamWriter) -> None:
        session: ClientSession | None = None
        releaser: asyncio.Task | None = None
        try:
            while True:
                try:
                    line = await reader.readline()
                except (asyncio.LimitOverrunError, ValueError):
                    await self._send(writer, protocol.error("BAD_REQUEST", "line too long"))
                    return
                if not line:
                    return
                if not line.strip():
                    continue
                try:
                    msg = protocol.decode(line)
                except protocol.BadRequest as exc:
                    await self._send(writer, protocol.error("BAD_REQUEST", str(exc)))
                    continue
                kind = msg["type"]
                if kind == "SUBSCRIBE" and session is None:
                    session = await self._handle_subscribe(msg, writer)
                    if session is not None:
                        releaser = asyncio.create_task(self._release_loop(session, writer))
                elif kind == "UNSUBSCRIBE":
                    return
                elif kind in ("SUBSCRIBE", "POLL"):
                    if session is None:
                        await self._send(writer, protocol.error("BAD_REQUEST", "not subscribed"))
                        continue
                    if not await self._handle_overrequest(session, msg, writer):
                        return
                else:
                    await self._send(writer, protocol.error("BAD_REQUEST", f"unknown message type {kind!r}"))
        finally:
            if releaser is not None:
                releaser.cancel()

    async def _handle_subscribe(self, msg: dict, writer: asyncio.StreamWriter) -> ClientSession | None:
        try:
            request = protocol.parse_subscribe(msg)
        except protocol.BadRequest as exc:
            await self._send(writer, protocol.error("BAD_REQUEST", str(exc)))
            return None
        try:
            effective = clamp(request, resolve(self.store, request.app_id))
        except DeniedByPolicy as exc:
            await self._send(writer, protocol.error("DENIED", str(exc)))
            return None
        except ValueError as exc:
            await self._send(writer, protocol.error("BAD_REQUEST", str(exc)))
            return None
        self._session_counter += 1
        session = ClientSession(
            app_id=request.app_id,
            request=request,
            effective=effective,
            rng=RandomSource.for_session(self.seed, self._session_counter),
            next_release_ms=self._now_ms() + effective.epoch_ms,
            store_version=self.store_version,
        )
        await self._send(writer, protocol.ack(effective))
        return session

    async def _handle_overrequest(self, session: ClientSession, msg: dict, writer) -> bool:
        """Reply to a mid-session POLL or re-SUBSCRIBE. Returns False when the connection must close."""
        faster = msg.get("epoch_ms")
        if msg["type"] == "SUBSCRIBE" and not (isinstance(faster, (int, float)) and faster < session.effective.epoch_ms):
            await self._send(writer, protocol.error("ALREADY_SUBSCRIBED", "one subscription per connection"))
            return True
        count = session.record_violation(self._now_ms())
        await self._send(writer, protocol.error(
            "RATE_LIMITED", f"next release in {max(0.0, session.next_release_ms - self._now_ms()):.0f} ms"
        ))
        if count >= MAX_VIOLATIONS_PER_EPOCH:
            log.warning("closing %s after %d rate-limit violations in one epoch", session.app_id, count)
            return False
        return True

    def _reclamp(self, session: ClientSession) -> dict | None:
        session.store_version = self.store_version
        effective = clamp(session.request, resolve(self.store, session.app_id))
        if effective != session.effective:
            session.effective = effective
            return protocol.ack(effective)
        return None

    async def _release_loop(self, session: ClientSession, writer: asyncio.StreamWriter) -> None:
        try:
            await self._release_forever(session, writer)
        except ConnectionError:
            writer.close()

    async def _release_forever(self, session: ClientSession, writer: asyncio.StreamWriter) -> None:
        while True:
            delay = (session.next_release_ms - self._now_ms()) / 1000.0
            if delay > 0:
                await asyncio.sleep(delay)
            now = self._now_ms()
            # a stall longer than an epoch drops the missed slots instead of bursting
            while session.next_release_ms + session.effective.epoch_ms <= now:
                session.next_release_ms += session.effective.epoch_ms
            fix_age = None if self._latest_fix_ms is None else now - self._latest_fix_ms
            report = session.tick(self.latest_fix, fix_age, int(time.time() * 1000))
            if report is not None:
                await self._send(writer, report)
            if session.store_version != self.store_version:
                boundary = session.next_release_ms - session.effective.epoch_ms
                try:
                    update = self._reclamp(session)
                except DeniedByPolicy as exc:
                    await self._send(writer, protocol.error("DENIED", str(exc)))
                    writer.close()
                    return
                session.next_release_ms = boundary + session.effective.epoch_ms
                if update is not None:
                    await self._send(writer, update)
