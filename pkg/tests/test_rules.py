import json

import pytest

from apsafety.messages import DEFAULT_EDGES, ProgramState
from apsafety.rules import (
    IO_ACCESS,
    PHYSIOLOGICAL,
    STATE_TRANSITION,
    TIME_TRIGGERED,
    BgRange,
    HeartbeatTimeout,
    IoAccessRule,
    MaxBolus,
    default_rules,
    dump_rules,
    load_rules,
    rule_from_dict,
    rule_to_dict,
    without,
)

S = ProgramState


def test_default_rules_cover_all_categories():
    cats = {r.category for r in default_rules()}
    assert cats == {IO_ACCESS, STATE_TRANSITION, PHYSIOLOGICAL, TIME_TRIGGERED}
    ids = [r.id for r in default_rules()]
    assert len(ids) == len(set(ids))
    assert "min-bolus-interval" in ids and "heartbeat-timeout" in ids


def test_pump_only_reachable_from_infuse_insulin():
    pump = next(r for r in default_rules() if isinstance(r, IoAccessRule) and r.device == "pump")
    assert pump.allowed_states == frozenset({S.INFUSE_INSULIN})


def test_every_non_alert_state_may_raise_an_alert():
    for s in ProgramState:
        if s is not S.ALERT:
            assert (s, S.ALERT) in DEFAULT_EDGES
    assert (S.IDLE, S.INFUSE_INSULIN) not in DEFAULT_EDGES


@pytest.mark.parametrize("rule", default_rules(), ids=lambda r: r.id)
def test_dict_round_trip(rule):
    data = json.loads(json.dumps(rule_to_dict(rule)))
    assert rule_from_dict(data) == rule


def test_file_round_trip(tmp_path):
    path = tmp_path / "rules.json"
    path.write_text(dump_rules(default_rules()))
    assert load_rules(path) == default_rules()


def test_duplicate_ids_rejected(tmp_path):
    path = tmp_path / "rules.json"
    entry = rule_to_dict(MaxBolus("dup", 5.0))
    path.write_text(json.dumps([entry, entry]))
    with pytest.raises(ValueError):
        load_rules(path)


@pytest.mark.parametrize(
    "data",
    [
        {"id": "x", "kind": "max_bolus", "units": 0},
        {"id": "x", "kind": "max_bolus", "units": 5, "colour": "red"},
        {"id": "x", "kind": "teleport"},
        {"id": "", "kind": "max_bolus", "units": 5},
        {"id": "x", "kind": "bg_range", "lo": 300, "hi": 60, "max_rate": 5},
        {"id": "x", "kind": "heartbeat_timeout", "units": 0, "period_ms": 1000},
    ],
)
def test_invalid_rules_rejected(data):
    with pytest.raises(ValueError):
        rule_from_dict(data)


def test_without_removes_by_id():
    rules = without(default_rules(), "max-bolus")
    assert all(r.id != "max-bolus" for r in rules)
    assert len(rules) == len(default_rules()) - 1


def test_heartbeat_period_follows_configuration():
    hb = next(r for r in default_rules(5000) if isinstance(r, HeartbeatTimeout))
    assert hb.period_ms == 5000 and hb.units == 3


def test_bg_range_defaults():
    r = next(r for r in default_rules() if isinstance(r, BgRange))
    assert (r.lo, r.hi) == (60.0, 300.0)
