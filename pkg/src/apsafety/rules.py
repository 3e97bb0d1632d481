"""Safety rules enforced at run time by the coprocessor.

A rule set is a list of small frozen dataclasses, one class per rule kind,
grouped into four categories.  Rule files are JSON lists of objects with an
``id``, a ``kind`` and the kind's parameters.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, fields
from pathlib import Path
from typing import ClassVar

from .messages import DEFAULT_EDGES, ProgramState

IO_ACCESS = "io_access"
STATE_TRANSITION = "state_transition"
PHYSIOLOGICAL = "physiological"
TIME_TRIGGERED = "time_triggered"

S = ProgramState


@dataclass(frozen=True)
class IoAccessRule:
    """Which program states may touch ``device`` and how often.

    ``max_access_frequency`` is ``(count, window_ms)``: more than ``count``
    accesses within any ``window_ms`` is a violation.
    """

    id: str
    device: str
    allowed_states: frozenset[ProgramState]
    max_accesses_per_entry: int | None = 1
    max_access_frequency: tuple[int, int] | None = None
    category: ClassVar[str] = IO_ACCESS


@dataclass(frozen=True)
class StateTransitionRule:
    id: str
    legal_edges: frozenset[tuple[ProgramState, ProgramState]] = DEFAULT_EDGES
    max_dwell: dict[ProgramState, int] = field(default_factory=dict)  # ms
    max_entry_frequency: dict[ProgramState, tuple[int, int]] = field(default_factory=dict)
    category: ClassVar[str] = STATE_TRANSITION

    def __hash__(self) -> int:
        return hash(self.id)


@dataclass(frozen=True)
class MinBolusInterval:
    id: str
    minutes: float
    category: ClassVar[str] = PHYSIOLOGICAL


@dataclass(frozen=True)
class MaxBolus:
    id: str
    units: float
    category: ClassVar[str] = PHYSIOLOGICAL


@dataclass(frozen=True)
class MaxBasalRate:
    id: str
    units_per_hour: float
    category: ClassVar[str] = PHYSIOLOGICAL


@dataclass(frozen=True)
class BgRange:
    """Critical BG bounds plus a rate-of-change limit (mg/dL/min)."""

    id: str
    lo: float
    hi: float
    max_rate: float
    category: ClassVar[str] = PHYSIOLOGICAL


@dataclass(frozen=True)
class ExpectBgRiseAfterBolus:
    """Registered on every allowed bolus.

    Warns at each new sample that is more than ``drop_threshold`` below the
    BG at infusion, until a sample exceeds the running minimum by
    ``rise_margin`` or ``window`` minutes pass.
    """

    id: str
    drop_threshold: float
    window: float
    rise_margin: float = 3.0
    category: ClassVar[str] = TIME_TRIGGERED


@dataclass(frozen=True)
class WarnBgRiseNoBolus:
    """Warns while BG sits more than ``rise_threshold`` above the window minimum.

    A bolus registered no earlier than one window before that minimum covers
    the rise, so a meal bolus stays effective while the meal is absorbed.
    """

    id: str
    rise_threshold: float
    window: float
    category: ClassVar[str] = TIME_TRIGGERED


@dataclass(frozen=True)
class HeartbeatTimeout:
    id: str
    units: int
    period_ms: int
    reset_main: bool = True
    category: ClassVar[str] = TIME_TRIGGERED


SafetyRule = (
    IoAccessRule
    | StateTransitionRule
    | MinBolusInterval
    | MaxBolus
    | MaxBasalRate
    | BgRange
    | ExpectBgRiseAfterBolus
    | WarnBgRiseNoBolus
    | HeartbeatTimeout
)

_KINDS: dict[str, type] = {
    "io_access": IoAccessRule,
    "state_transition": StateTransitionRule,
    "min_bolus_interval": MinBolusInterval,
    "max_bolus": MaxBolus,
    "max_basal_rate": MaxBasalRate,
    "bg_range": BgRange,
    "expect_bg_rise_after_bolus": ExpectBgRiseAfterBolus,
    "warn_bg_rise_no_bolus": WarnBgRiseNoBolus,
    "heartbeat_timeout": HeartbeatTimeout,
}
_KIND_OF = {cls: name for name, cls in _KINDS.items()}

_POSITIVE = {
    "minutes", "units", "units_per_hour", "lo", "hi", "max_rate",
    "drop_threshold", "window", "rise_margin", "rise_threshold", "period_ms",
}


def validate(rule: SafetyRule) -> None:
    if not rule.id:
        raise ValueError("rule id must be non-empty")
    for f in fields(rule):
        if f.name in _POSITIVE and not getattr(rule, f.name) > 0:
            raise ValueError(f"{rule.id}: {f.name} must be > 0")
    if isinstance(rule, HeartbeatTimeout) and rule.units < 1:
        raise ValueError(f"{rule.id}: units must be >= 1")
    if isinstance(rule, BgRange) and rule.lo >= rule.hi:
        raise ValueError(f"{rule.id}: lo must be below hi")
    if isinstance(rule, IoAccessRule):
        if rule.max_accesses_per_entry is not None and rule.max_accesses_per_entry < 1:
            raise ValueError(f"{rule.id}: max_accesses_per_entry must be >= 1")
        if rule.max_access_frequency is not None:
            count, window = rule.max_access_frequency
            if count < 1 or window <= 0:
                raise ValueError(f"{rule.id}: max_access_frequency must be positive")


def default_rules(heartbeat_period_ms: int = 60_000) -> list[SafetyRule]:
    rules: list[SafetyRule] = [
        IoAccessRule("io-pump", "pump", frozenset({S.INFUSE_INSULIN}), max_accesses_per_entry=1),
        IoAccessRule(
            "io-rf", "rf", frozenset({S.RF_ACCESS}), max_accesses_per_entry=1,
            max_access_frequency=(6, 600_000),
        ),
        StateTransitionRule(
            "state-transition",
            max_dwell={s: 2_000 for s in ProgramState if s is not S.IDLE},
            max_entry_frequency={S.RF_ACCESS: (6, 600_000)},
        ),
        MinBolusInterval("min-bolus-interval", 60.0),
        MaxBolus("max-bolus", 15.0),
        MaxBasalRate("max-basal-rate", 3.0),
        BgRange("bg-range", lo=60.0, hi=300.0, max_rate=10.0),
        ExpectBgRiseAfterBolus("expect-bg-rise-after-bolus", drop_threshold=10.0, window=240.0),
        WarnBgRiseNoBolus("warn-bg-rise-no-bolus", rise_threshold=10.0, window=90.0),
        HeartbeatTimeout("heartbeat-timeout", units=3, period_ms=heartbeat_period_ms),
    ]
    for rule in rules:
        validate(rule)
    return rules


def rule_to_dict(rule: SafetyRule) -> dict:
    out = {"id": rule.id, "kind": _KIND_OF[type(rule)], "category": rule.category}
    for f in fields(rule):
        if f.name == "id":
            continue
        value = getattr(rule, f.name)
        if f.name == "allowed_states":
            value = sorted(s.value for s in value)
        elif f.name == "legal_edges":
            value = sorted([a.value, b.value] for a, b in value)
        elif f.name in ("max_dwell", "max_entry_frequency"):
            value = {s.value: (list(v) if isinstance(v, tuple) else v) for s, v in sorted(value.items())}
        elif isinstance(value, tuple):
            value = list(value)
        out[f.name] = value
    return out


def rule_from_dict(data: dict) -> SafetyRule:
    data = dict(data)
    kind = data.pop("kind", None)
    data.pop("category", None)
    if kind not in _KINDS:
        raise ValueError(f"unknown rule kind {kind!r}")
    cls = _KINDS[kind]
    if "allowed_states" in data:
        data["allowed_states"] = frozenset(ProgramState(s) for s in data["allowed_states"])
    if "legal_edges" in data:
        data["legal_edges"] = frozenset((ProgramState(a), ProgramState(b)) for a, b in data["legal_edges"])
    if "max_dwell" in data:
        data["max_dwell"] = {ProgramState(k): int(v) for k, v in data["max_dwell"].items()}
    if "max_entry_frequency" in data:
        data["max_entry_frequency"] = {
            ProgramState(k): (int(v[0]), int(v[1])) for k, v in data["max_entry_frequency"].items()
        }
    if data.get("max_access_frequency") is not None:
        count, window = data["max_access_frequency"]
        data["max_access_frequency"] = (int(count), int(window))
    known = {f.name for f in fields(cls)}
    unknown = set(data) - known
    if unknown:
        raise ValueError(f"{kind}: unknown fields {sorted(unknown)}")
    rule = cls(**data)
    validate(rule)
    return rule


def load_rules(path: str | Path) -> list[SafetyRule]:
    entries = json.loads(Path(path).read_text())
    rules = [rule_from_dict(e) for e in entries]
    ids = [r.id for r in rules]
    if len(set(ids)) != len(ids):
        raise ValueError("duplicate rule ids")
    return rules


def dump_rules(rules: list[SafetyRule]) -> str:
    return json.dumps([rule_to_dict(r) for r in rules], indent=2, sort_keys=True)


def without(rules: list[SafetyRule], rule_id: str) -> list[SafetyRule]:
    return [r for r in rules if r.id != rule_id]

