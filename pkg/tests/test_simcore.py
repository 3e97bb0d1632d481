import pytest
from hypothesis import given
from hypothesis import strategies as st

from apsafety.simcore import (
    Event,
    SchedulingError,
    SerialChannel,
    Simulator,
    frame_latency_ms,
    minutes,
    transmit_time,
)
from oracles import uart_ms


def collecting_sim(*targets):
    sim = Simulator()
    seen = []
    for t in targets:
        sim.register(t, lambda e, seen=seen: seen.append((sim.now, e.target, e.kind)))
    return sim, seen


def test_events_dispatch_in_time_order():
    sim, seen = collecting_sim("a", "b")
    sim.schedule(Event(30, "x", "b", "late"))
    sim.schedule(Event(10, "x", "a", "early"))
    sim.schedule(Event(20, "x", "a", "mid"))
    sim.run_until(100)
    assert [k for _, _, k in seen] == ["early", "mid", "late"]
    assert sim.now == 100


def test_equal_timestamps_keep_fifo_order():
    sim, seen = collecting_sim("a")
    for k in "pqrs":
        sim.schedule(Event(5, "x", "a", k))
    sim.run_until(5)
    assert [k for _, _, k in seen] == list("pqrs")


def test_scheduling_in_the_past_is_rejected():
    sim = Simulator()
    sim.run_until(50)
    with pytest.raises(SchedulingError):
        sim.schedule(Event(49, "x", "a", "stale"))
    with pytest.raises(SchedulingError):
        sim.run_until(10)


def test_run_until_is_idempotent():
    sim, seen = collecting_sim("a")
    sim.schedule(Event(10, "x", "a", "k"))
    assert len(sim.run_until(20)) == 1
    assert sim.run_until(20) == []
    assert len(seen) == 1


def test_handlers_can_schedule_at_current_time():
    sim = Simulator()
    order = []

    def first(e):
        order.append("first")
        sim.schedule(Event(sim.now, "a", "b", "chained"))

    sim.register("a", first)
    sim.register("b", lambda e: order.append("second"))
    sim.schedule(Event(7, "x", "a", "go"))
    sim.run_until(7)
    assert order == ["first", "second"]


def test_command_frame_latency():
    # 240 bytes at 9600 baud, 10 bits per byte
    assert frame_latency_ms(240, 9600) == 250
    assert transmit_time(240, 9600) == pytest.approx(250.0)


def test_minutes_converts_to_ms():
    assert minutes(1) == 60_000
    assert minutes(60.5) == 3_630_000


@given(st.integers(1, 4096), st.sampled_from([1200, 2400, 9600, 19200, 57600, 115200]), st.integers(7, 12))
def test_latency_matches_ceiling_oracle(n, baud, bits):
    assert frame_latency_ms(n, baud, bits) == uart_ms(n, baud, bits)


@given(st.lists(st.tuples(st.integers(0, 2000), st.integers(1, 300)), min_size=1, max_size=30))
def test_channel_never_reorders_frames(sends):
    sim = Simulator()
    got = []
    sim.register("rx", lambda e: got.append((sim.now, e.payload)))
    ch = SerialChannel(sim, "imc", "rx")
    sends = sorted(sends, key=lambda s: s[0])
    expected_free = 0
    for i, (at, size) in enumerate(sends):
        sim.run_until(at)
        delivered = ch.transmit(i, size, at)
        expected_free = max(at, expected_free) + uart_ms(size, 9600)
        assert delivered == expected_free
    sim.run_until(10**9)
    assert [p for _, p in got] == list(range(len(sends)))
    assert all(a <= b for (a, _), (b, _) in zip(got, got[1:]))


def test_channel_rejects_bad_configuration():
    sim = Simulator()
    with pytest.raises(ValueError):
        SerialChannel(sim, "c", "t", baud=0)
    ch = SerialChannel(sim, "c", "t")
    with pytest.raises(ValueError):
        ch.transmit("x", 0, 0)
