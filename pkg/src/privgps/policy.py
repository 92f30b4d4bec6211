"""Data-owner privacy policies and clamping of client-requested parameters.

Policy file (UTF-8 JSON)::

    {
      "default": {"mode": "deny"},
      "apps": {
        "com.example.maps": {"mode": "radius", "min_epoch_ms": 5000, "min_radius_m": 500},
        "com.example.traffic": {
          "mode": "grid", "min_epoch_ms": 10000, "max_epsilon": 1.0,
          "grid": {"origin_lat": 34.05, "origin_lon": -118.45, "cell_size_m": 1000, "rows": 3, "cols": 3},
          "allowed_region": {"min_lat": 34.0, "min_lon": -118.5, "max_lat": 34.2, "max_lon": -118.3}
        }
      }
    }

Unknown fields are rejected. Applications without an entry get ``default``,
which covers self-declared (possibly fabricated) identifiers.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from types import MappingProxyType
from typing import Mapping

from privgps.geo import BoundingBox, GridSpec
from privgps.mechanisms import CoinPair, NoPrivacy, check_epsilon, coins_for_epsilon, epsilon_of

MODES = ("radius", "grid", "deny")
MIN_EPOCH_FLOOR_MS = 100
EPS_SLACK = 1e-9

_POLICY_FIELDS = {"mode", "min_epoch_ms", "min_radius_m", "max_epsilon", "grid", "allowed_region"}


class PolicyError(ValueError):
    pass


class ParseError(PolicyError):
    pass


class ValidationError(PolicyError):
    pass


class MissingDefault(PolicyError):
    pass


class DeniedByPolicy(PolicyError):
    pass


@dataclass(frozen=True)
class AppPolicy:
    app_id: str
    mode: str
    min_epoch_ms: int | None = None
    min_radius_m: float | None = None
    max_epsilon: float | None = None
    grid: GridSpec | None = None
    allowed_region: BoundingBox | None = None

    def __post_init__(self) -> None:
        if self.mode not in MODES:
            raise ValidationError(f"{self.app_id}: mode must be one of {MODES}, got {self.mode!r}")
        if self.mode != "deny" and self.min_epoch_ms is None:
            raise ValidationError(f"{self.app_id}: min_epoch_ms is required for mode {self.mode}")
        if self.min_epoch_ms is not None and self.min_epoch_ms < MIN_EPOCH_FLOOR_MS:
            raise ValidationError(f"{self.app_id}: min_epoch_ms must be >= {MIN_EPOCH_FLOOR_MS}")
        if self.mode == "radius" and self.min_radius_m is None:
            raise ValidationError(f"{self.app_id}: radius mode requires min_radius_m")
        if self.min_radius_m is not None and not (self.min_radius_m >= 0 and math.isfinite(self.min_radius_m)):
            raise ValidationError(f"{self.app_id}: min_radius_m must be >= 0")
        if self.mode == "grid" and (self.max_epsilon is None or self.grid is None):
            raise ValidationError(f"{self.app_id}: grid mode requires max_epsilon and grid")
        if self.max_epsilon is not None:
            try:
                coins_for_epsilon(self.max_epsilon)
            except ValueError as exc:
                raise ValidationError(f"{self.app_id}: max_epsilon: {exc}") from None

    def to_dict(self) -> dict:
        d: dict = {"mode": self.mode}
        for key in ("min_epoch_ms", "min_radius_m", "max_epsilon"):
            if getattr(self, key) is not None:
                d[key] = getattr(self, key)
        if self.grid is not None:
            d["grid"] = self.grid.to_dict()
        if self.allowed_region is not None:
            d["allowed_region"] = self.allowed_region.to_dict()
        return d


@dataclass(frozen=True)
class PolicyStore:
    default: AppPolicy
    entries: Mapping[str, AppPolicy] = field(default_factory=dict)

    def __post_init__(self) -> None:
        object.__setattr__(self, "entries", MappingProxyType(dict(self.entries)))


@dataclass(frozen=True)
class SubscribeRequest:
    """Parameters a client asks for; every field is optional."""

    app_id: str = "default"
    epoch_ms: int | None = None
    radius_m: float | None = None
    epsilon: float | None = None
    coins: CoinPair | None = None


@dataclass(frozen=True)
class EffectiveConfig:
    mode: str
    epoch_ms: int
    radius_m: float | None = None
    coins: CoinPair | None = None
    grid: GridSpec | None = None
    allowed_region: BoundingBox | None = None

    @property
    def epsilon(self) -> float | None:
        return None if self.coins is None else epsilon_of(self.coins)

    def as_request(self, app_id: str = "default") -> SubscribeRequest:
        return SubscribeRequest(app_id=app_id, epoch_ms=self.epoch_ms, radius_m=self.radius_m, coins=self.coins)


def resolve(store: PolicyStore, app_id: str) -> AppPolicy:
    return store.entries.get(app_id, store.default)


def _within_budget(coins: CoinPair, max_epsilon: float) -> bool:
    try:
        return epsilon_of(coins) <= max_epsilon + EPS_SLACK
    except NoPrivacy:
        return False


def clamp(requested: SubscribeRequest, policy: AppPolicy) -> EffectiveConfig:
    """Combine a client's request with the owner's limits, never loosening them.

    Explicit coins win over a requested epsilon when both are given; coins
    over budget are replaced by the symmetric channel at the budget.
    """
    if policy.mode == "deny":
        raise DeniedByPolicy(f"policy for {policy.app_id!r} denies location release")
    epoch = policy.min_epoch_ms if requested.epoch_ms is None else max(requested.epoch_ms, policy.min_epoch_ms)
    if policy.mode == "radius":
        radius = policy.min_radius_m if requested.radius_m is None else max(requested.radius_m, policy.min_radius_m)
        return EffectiveConfig("radius", int(epoch), radius_m=float(radius), allowed_region=policy.allowed_region)

    if requested.coins is not None:
        coins = requested.coins if _within_budget(requested.coins, policy.max_epsilon) else coins_for_epsilon(policy.max_epsilon)
    elif requested.epsilon is not None:
        coins = coins_for_epsilon(min(check_epsilon(requested.epsilon), policy.max_epsilon))
    else:
        coins = coins_for_epsilon(policy.max_epsilon)
    return EffectiveConfig("grid", int(epoch), coins=coins, grid=policy.grid, allowed_region=policy.allowed_region)


def _number(d: dict, key: str, app_id: str, *, integer: bool = False):
    v = d.get(key)
    if v is None:
        return None
    ok = isinstance(v, int) if integer else isinstance(v, (int, float))
    if isinstance(v, bool) or not ok:
        kind = "an integer" if integer else "a number"
        raise ValidationError(f"{app_id}: {key} must be {kind}, got {v!r}")
    return v if integer else float(v)


def _policy_from_dict(app_id: str, d) -> AppPolicy:
    if not isinstance(d, dict):
        raise ValidationError(f"{app_id}: policy must be an object")
    unknown = set(d) - _POLICY_FIELDS
    if unknown:
        raise ValidationError(f"{app_id}: unknown fields {sorted(unknown)}")
    try:
        grid = GridSpec.from_dict(d["grid"]) if d.get("grid") is not None else None
        region = BoundingBox.from_dict(d["allowed_region"]) if d.get("allowed_region") is not None else None
    except (ValueError, TypeError, AttributeError) as exc:
        raise ValidationError(f"{app_id}: {exc}") from None
    return AppPolicy(
        app_id=app_id,
        mode=d.get("mode"),
        min_epoch_ms=_number(d, "min_epoch_ms", app_id, integer=True),
        min_radius_m=_number(d, "min_radius_m", app_id),
        max_epsilon=_number(d, "max_epsilon", app_id),
        grid=grid,
        allowed_region=region,
    )


def load_policies(document: bytes | str) -> PolicyStore:
    if isinstance(document, bytes):
        try:
            document = document.decode("utf-8")
        except UnicodeDecodeError as exc:
            raise ParseError(f"policy file is not UTF-8: {exc}") from None
    try:
        doc = json.loads(document)
    except json.JSONDecodeError as exc:
        raise ParseError(f"line {exc.lineno}, column {exc.colno}: {exc.msg}") from None
    if not isinstance(doc, dict):
        raise ParseError("top level must be a JSON object")
    unknown = set(doc) - {"default", "apps"}
    if unknown:
        raise ValidationError(f"unknown top-level fields {sorted(unknown)}")
    if "default" not in doc:
        raise MissingDefault("policy file has no 'default' entry")
    apps = doc.get("apps", {})
    if not isinstance(apps, dict):
        raise ValidationError("'apps' must be an object")
    if "default" in apps:
        raise ValidationError("'default' is reserved and cannot appear under 'apps'")
    default = _policy_from_dict("default", doc["default"])
    entries = {app_id: _policy_from_dict(app_id, d) for app_id, d in apps.items()}
    return PolicyStore(default=default, entries=entries)


def dump_policies(store: PolicyStore) -> str:
    doc = {"default": store.default.to_dict(), "apps": {k: v.to_dict() for k, v in store.entries.items()}}
    return json.dumps(doc, indent=2, sort_keys=True)


def reload(store: PolicyStore, document: bytes | str) -> PolicyStore:
    """Parse ``document`` into a replacement store.

    Raises on any error, in which case the caller keeps ``store``; a partially
    applied document is never produced.
    """
    return load_policies(document)

