"""GPS fix ingestion: NMEA 0183 parsing, timed file replay, synthetic tracks.

Only GGA and RMC sentences carry a position here; every other well-formed
sentence parses to ``None``. Sources never hand a ``no_fix`` reading to
consumers.
"""

from __future__ import annotations

import asyncio
import bisect
import calendar
import datetime
import enum
import logging
import math
import time
from dataclasses import dataclass
from pathlib import Path
from typing import AsyncIterator, Iterator, Sequence

from privgps.geo import GeoPoint, haversine_m

log = logging.getLogger(__name__)

DAY_MS = 86_400_000


class FixQuality(enum.Enum):
    NO_FIX = "no_fix"
    GPS = "gps"
    DGPS = "dgps"


_GGA_QUALITY = {0: FixQuality.NO_FIX, 1: FixQuality.GPS, 2: FixQuality.DGPS, 3: FixQuality.DGPS,
                4: FixQuality.DGPS, 5: FixQuality.DGPS, 6: FixQuality.NO_FIX, 7: FixQuality.NO_FIX,
                8: FixQuality.NO_FIX}


@dataclass(frozen=True)
class Fix:
    point: GeoPoint | None
    timestamp_ms: int
    quality: FixQuality = FixQuality.GPS
    num_satellites: int = 0
    hdop: float | None = None

    @property
    def usable(self) -> bool:
        return self.quality is not FixQuality.NO_FIX and self.point is not None


class ParseError(ValueError):
    def __init__(self, message: str, field: str | None = None):
        super().__init__(message)
        self.field = field


class BadChecksum(ParseError):
    pass


class BadFieldCount(ParseError):
    pass


class BadNumber(ParseError):
    pass


def nmea_checksum(payload: str) -> str:
    """XOR of every byte between ``$`` and ``*`` as two uppercase hex digits."""
    c = 0
    for b in payload.encode("ascii"):
        c ^= b
    return f"{c:02X}"


def render_sentence(payload: str) -> str:
    return f"${payload}*{nmea_checksum(payload)}"


def _split_checked(line: str) -> list[str]:
    line = line.strip()
    if not line.startswith("$"):
        raise BadChecksum("sentence does not start with '$'", field=line[:1])
    star = line.rfind("*")
    if star < 0 or len(line) - star != 3:
        raise BadChecksum("missing '*hh' checksum suffix", field=line[star:] if star >= 0 else None)
    payload, given = line[1:star], line[star + 1:]
    try:
        payload.encode("ascii")
    except UnicodeEncodeError:
        raise BadChecksum("non-ASCII payload", field=payload) from None
    if given.upper() != nmea_checksum(payload):
        raise BadChecksum(f"checksum {given} != computed {nmea_checksum(payload)}", field=given)
    return payload.split(",")


def _coord(value: str, hemi: str, deg_digits: int, name: str) -> float:
    whole, _, frac = value.partition(".")
    if len(whole) != deg_digits + 2 or not whole.isdigit() or (frac and not frac.isdigit()):
        raise BadNumber(f"malformed {name} {value!r}", field=value)
    deg = int(whole[:deg_digits])
    minutes = float(f"{whole[deg_digits:]}.{frac or '0'}")
    if minutes >= 60.0:
        raise BadNumber(f"{name} minutes out of range in {value!r}", field=value)
    out = deg + minutes / 60.0
    limit = 90.0 if deg_digits == 2 else 180.0
    if out > limit:
        raise BadNumber(f"{name} {value!r} out of range", field=value)
    positive, negative = ("N", "S") if deg_digits == 2 else ("E", "W")
    if hemi == negative:
        return -out
    if hemi != positive:
        raise BadNumber(f"bad hemisphere {hemi!r} for {name}", field=hemi)
    return out


def _time_of_day_ms(value: str) -> int:
    whole, _, frac = value.partition(".")
    if len(whole) != 6 or not whole.isdigit() or (frac and not frac.isdigit()):
        raise BadNumber(f"malformed time {value!r}", field=value)
    hh, mm, ss = int(whole[:2]), int(whole[2:4]), int(whole[4:])
    if hh > 23 or mm > 59 or ss > 60:
        raise BadNumber(f"time {value!r} out of range", field=value)
    ms = round(float(f"0.{frac}") * 1000) if frac else 0
    return ((hh * 60 + mm) * 60 + ss) * 1000 + ms


def _date_ms(value: str) -> int:
    if len(value) != 6 or not value.isdigit():
        raise BadNumber(f"malformed date {value!r}", field=value)
    dd, mo, yy = int(value[:2]), int(value[2:4]), int(value[4:])
    year = 2000 + yy if yy < 80 else 1900 + yy
    try:
        return calendar.timegm(datetime.date(year, mo, dd).timetuple()) * 1000
    except ValueError:
        raise BadNumber(f"date {value!r} out of range", field=value) from None


def _int(value: str, name: str) -> int:
    if not value.isdigit():
        raise BadNumber(f"malformed {name} {value!r}", field=value)
    return int(value)


def _parse_gga(f: list[str]) -> Fix:
    if len(f) != 15:
        raise BadFieldCount(f"GGA needs 15 fields, got {len(f)}", field=f[0])
    tod = _time_of_day_ms(f[1]) if f[1] else 0
    quality = _GGA_QUALITY.get(_int(f[6], "quality"), FixQuality.NO_FIX) if f[6] else FixQuality.NO_FIX
    sats = _int(f[7], "satellites") if f[7] else 0
    try:
        hdop = float(f[8]) if f[8] else None
    except ValueError:
        raise BadNumber(f"malformed hdop {f[8]!r}", field=f[8]) from None
    point = None
    if quality is not FixQuality.NO_FIX:
        point = GeoPoint(_coord(f[2], f[3], 2, "latitude"), _coord(f[4], f[5], 3, "longitude"))
    return Fix(point, tod, quality, sats, hdop)


def _parse_rmc(f: list[str]) -> Fix:
    if len(f) not in (12, 13, 14):
        raise BadFieldCount(f"RMC needs 12-14 fields, got {len(f)}", field=f[0])
    tod = _time_of_day_ms(f[1]) if f[1] else 0
    ts = tod + (_date_ms(f[9]) if f[9] else 0)
    if f[2] not in ("A", "V"):
        raise BadNumber(f"bad RMC status {f[2]!r}", field=f[2])
    if f[2] == "V":
        return Fix(None, ts, FixQuality.NO_FIX)
    point = GeoPoint(_coord(f[3], f[4], 2, "latitude"), _coord(f[5], f[6], 3, "longitude"))
    return Fix(point, ts, FixQuality.GPS)


def parse_nmea(line: str) -> Fix | None:
    """Parse one sentence. Returns ``None`` for valid sentences without a position.

    GGA timestamps are milliseconds into the UTC day (GGA carries no date);
    RMC timestamps are milliseconds since the Unix epoch.
    """
    f = _split_checked(line)
    kind = f[0][-3:] if len(f[0]) >= 5 else f[0]
    if kind == "GGA":
        return _parse_gga(f)
    if kind == "RMC":
        return _parse_rmc(f)
    return None


class ReplaySource:
    """Replays an NMEA log, spacing fixes by their recorded times / ``speedup``.

    Corrupt lines are logged, counted in ``skipped`` and otherwise ignored.
    ``speedup=math.inf`` emits as fast as the consumer reads.
    """

    def __init__(self, path: str | Path, speedup: float = 1.0):
        if not speedup > 0:
            raise ValueError("speedup must be positive")
        self.path = Path(path)
        self.speedup = speedup
        self.skipped = 0
        self.no_fix = 0

    def fixes(self) -> Iterator[Fix]:
        self.skipped = self.no_fix = 0
        date_ms = 0
        last_tod = None
        prev_ts = None
        with self.path.open("r", encoding="ascii", errors="replace") as fh:
            for lineno, line in enumerate(fh, 1):
                if not line.strip():
                    continue
                try:
                    fix = parse_nmea(line)
                except (ParseError, ValueError) as exc:
                    self.skipped += 1
                    log.debug("%s:%d skipped: %s", self.path, lineno, exc)
                    continue
                if fix is None:
                    continue
                tod = fix.timestamp_ms % DAY_MS
                if fix.timestamp_ms >= DAY_MS:
                    date_ms = fix.timestamp_ms - tod
                elif last_tod is not None and tod < last_tod - DAY_MS // 2:
                    date_ms += DAY_MS  # midnight rollover between dated sentences
                last_tod = tod
                ts = date_ms + tod
                if prev_ts is not None and ts < prev_ts:
                    ts = prev_ts
                prev_ts = ts
                if not fix.usable:
                    self.no_fix += 1
                    continue
                yield Fix(fix.point, ts, fix.quality, fix.num_satellites, fix.hdop)

    async def stream(self) -> AsyncIterator[Fix]:
        loop = asyncio.get_running_loop()
        start = first_ts = None
        for fix in self.fixes():
            if start is None:
                start, first_ts = loop.time(), fix.timestamp_ms
            elif math.isfinite(self.speedup):
                due = start + (fix.timestamp_ms - first_ts) / 1000.0 / self.speedup
                delay = due - loop.time()
                if delay > 0:
                    await asyncio.sleep(delay)
            else:
                await asyncio.sleep(0)
            yield fix


class SyntheticSource:
    """Moves along a waypoint path at constant speed, looping back to the start at the end."""

    def __init__(self, waypoints: Sequence[GeoPoint], speed_mps: float = 10.0, rate_hz: float = 10.0):
        if len(waypoints) < 2:
            raise ValueError("need at least two waypoints")
        if not (speed_mps > 0 and rate_hz > 0):
            raise ValueError("speed and rate must be positive")
        self.waypoints = list(waypoints)
        self.speed_mps = float(speed_mps)
        self.rate_hz = float(rate_hz)
        cum = [0.0]
        for a, b in zip(self.waypoints, self.waypoints[1:]):
            cum.append(cum[-1] + haversine_m(a, b))
        self._cum = cum

    @property
    def path_length_m(self) -> float:
        return self._cum[-1]

    def position_at(self, distance_m: float) -> GeoPoint:
        total = self._cum[-1]
        if total == 0:
            return self.waypoints[0]
        s = distance_m % total
        seg = min(bisect.bisect_right(self._cum, s) - 1, len(self.waypoints) - 2)
        seg_len = self._cum[seg + 1] - self._cum[seg]
        frac = 0.0 if seg_len == 0 else (s - self._cum[seg]) / seg_len
        a, b = self.waypoints[seg], self.waypoints[seg + 1]
        return GeoPoint(a.lat_deg + frac * (b.lat_deg - a.lat_deg), a.lon_deg + frac * (b.lon_deg - a.lon_deg))

    def fix_at(self, k: int, start_ms: int = 0) -> Fix:
        t = k / self.rate_hz
        return Fix(self.position_at(self.speed_mps * t), start_ms + round(t * 1000), FixQuality.GPS, 8, 1.0)

    def fixes(self, start_ms: int = 0) -> Iterator[Fix]:
        k = 0
        while True:
            yield self.fix_at(k, start_ms)
            k += 1

    async def stream(self) -> AsyncIterator[Fix]:
        loop = asyncio.get_running_loop()
        start = loop.time()
        start_ms = int(time.time() * 1000)
        k = 0
        while True:
            delay = start + k / self.rate_hz - loop.time()
            if delay > 0:
                await asyncio.sleep(delay)
            yield self.fix_at(k, start_ms)
            k += 1


def parse_source_spec(spec: str, speedup: float = 1.0, no_throttle: bool = False):
    """Build a source from ``nmea:<path>`` or ``synthetic:<lat>,<lon>;<lat>,<lon>[...][/speed=M][/rate=H]``."""
    kind, sep, rest = spec.partition(":")
    if not sep:
        raise ValueError(f"source spec {spec!r} needs a 'nmea:' or 'synthetic:' prefix")
    if kind == "nmea":
        return ReplaySource(rest, math.inf if no_throttle else speedup)
    if kind == "synthetic":
        path, *opts = rest.split("/")
        points = []
        for pair in path.split(";"):
            lat, lon = pair.split(",")
            points.append(GeoPoint(float(lat), float(lon)))
        kwargs = {}
        for opt in opts:
            key, _, value = opt.partition("=")
            if key not in ("speed", "rate"):
                raise ValueError(f"unknown synthetic option {key!r}")
            kwargs["speed_mps" if key == "speed" else "rate_hz"] = float(value)
        return SyntheticSource(points, **kwargs)
    raise ValueError(f"unknown source kind {kind!r}")
