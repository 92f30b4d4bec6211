"""Newline-delimited JSON wire messages exchanged with the daemon.

Client to daemon: SUBSCRIBE, POLL, UNSUBSCRIBE. Daemon to client: ACK,
REPORT, ERROR. One JSON object per line, UTF-8, ``\\n`` terminated.
"""

from __future__ import annotations

import json
import math

from privgps.mechanisms import CoinPair
from privgps.policy import EffectiveConfig, SubscribeRequest

DEFAULT_PORT = 2948
MAX_LINE_BYTES = 64 * 1024
MAX_APP_ID_LEN = 256

ERROR_CODES = ("CAPACITY", "DENIED", "BAD_REQUEST", "ALREADY_SUBSCRIBED", "RATE_LIMITED")


class BadRequest(ValueError):
    pass


def encode(msg: dict) -> bytes:
    return json.dumps(msg, separators=(",", ":"), allow_nan=False).encode("utf-8") + b"\n"


def decode(line: bytes) -> dict:
    try:
        msg = json.loads(line.decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise BadRequest(f"not a JSON line: {exc}") from None
    if not isinstance(msg, dict) or not isinstance(msg.get("type"), str):
        raise BadRequest("message must be an object with a string 'type'")
    return msg


def error(code: str, detail: str) -> dict:
    assert code in ERROR_CODES, code
    return {"type": "ERROR", "code": code, "detail": detail}


def _opt_number(msg: dict, key: str, *, integer: bool = False, positive: bool = False):
    v = msg.get(key)
    if v is None:
        return None
    if isinstance(v, bool) or not isinstance(v, int if integer else (int, float)):
        raise BadRequest(f"{key} must be {'an integer' if integer else 'a number'}")
    if not math.isfinite(v) or v < 0 or (positive and v == 0):
        raise BadRequest(f"{key} out of range: {v!r}")
    return v


def parse_subscribe(msg: dict) -> SubscribeRequest:
    allowed = {"type", "app_id", "epoch_ms", "radius_m", "epsilon", "coins"}
    unknown = set(msg) - allowed
    if unknown:
        raise BadRequest(f"unknown fields {sorted(unknown)}")
    app_id = msg.get("app_id")
    if not isinstance(app_id, str) or not app_id or len(app_id) > MAX_APP_ID_LEN:
        raise BadRequest("app_id must be a non-empty string")
    coins = msg.get("coins")
    if coins is not None:
        if not isinstance(coins, dict) or set(coins) != {"p", "q"}:
            raise BadRequest("coins must be an object with exactly 'p' and 'q'")
        try:
            coins = CoinPair(_opt_number(coins, "p"), _opt_number(coins, "q"))
        except (ValueError, TypeError) as exc:
            raise BadRequest(f"coins: {exc}") from None
    return SubscribeRequest(
        app_id=app_id,
        epoch_ms=_opt_number(msg, "epoch_ms", integer=True, positive=True),
        radius_m=_opt_number(msg, "radius_m"),
        epsilon=_opt_number(msg, "epsilon", positive=True),
        coins=coins,
    )


def subscribe(app_id: str, *, epoch_ms=None, radius_m=None, epsilon=None, coins: CoinPair | None = None) -> dict:
    msg: dict = {"type": "SUBSCRIBE", "app_id": app_id}
    if epoch_ms is not None:
        msg["epoch_ms"] = epoch_ms
    if radius_m is not None:
        msg["radius_m"] = radius_m
    if epsilon is not None:
        msg["epsilon"] = epsilon
    if coins is not None:
        msg["coins"] = coins.to_dict()
    return msg


def ack(cfg: EffectiveConfig) -> dict:
    msg: dict = {"type": "ACK", "mode": cfg.mode, "epoch_ms": cfg.epoch_ms}
    if cfg.mode == "radius":
        msg["radius_m"] = cfg.radius_m
    else:
        msg["epsilon"] = cfg.epsilon
        msg["coins"] = cfg.coins.to_dict()
        msg["grid"] = cfg.grid.to_dict()
    return msg
