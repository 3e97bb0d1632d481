"""Virtual clock, deterministic event queue and UART channel model.

Time is an integer count of milliseconds.  Events with equal timestamps are
delivered in insertion order.
"""

from __future__ import annotations

import heapq
from dataclasses import dataclass, field
from typing import Any, Callable

SimTime = int

MS_PER_MIN = 60_000


def minutes(value: float) -> SimTime:
    """Convert minutes to integer ticks (rounded to the nearest ms)."""
    return int(round(value * MS_PER_MIN))


class SchedulingError(ValueError):
    """Raised when an event is scheduled before the current time."""


@dataclass(frozen=True)
class Event:
    at: SimTime
    source: str
    target: str
    kind: str
    payload: Any = None


@dataclass(order=True)
class _Entry:
    at: SimTime
    seq: int
    event: Event = field(compare=False)


class Simulator:
    """Single-threaded discrete-event loop.

    Components register a handler under a target name; every scheduled event
    is dispatched to the handler of its ``target``.  Handlers may schedule
    further events at or after the current time.
    """

    def __init__(self) -> None:
        self.now: SimTime = 0
        self._queue: list[_Entry] = []
        self._seq = 0
        self._handlers: dict[str, Callable[[Event], None]] = {}
        self.log: list[Event] = []

    def register(self, target: str, handler: Callable[[Event], None]) -> None:
        self._handlers[target] = handler

    def schedule(self, event: Event) -> None:
        if event.at < self.now:
            raise SchedulingError(
                f"event {event.kind!r} from {event.source!r} scheduled at "
                f"{event.at} ms, before current time {self.now} ms"
            )
        heapq.heappush(self._queue, _Entry(event.at, self._seq, event))
        self._seq += 1

    def pending(self) -> int:
        return len(self._queue)

    def peek_time(self) -> SimTime | None:
        return self._queue[0].at if self._queue else None

    def run_until(self, t_end: SimTime) -> list[Event]:
        """Process every event with ``at <= t_end``; return the processed events."""
        if t_end < self.now:
            raise SchedulingError(f"run_until({t_end}) is before current time {self.now}")
        processed: list[Event] = []
        while self._queue and self._queue[0].at <= t_end:
            entry = heapq.heappop(self._queue)
            self.now = entry.at
            event = entry.event
            handler = self._handlers.get(event.target)
            if handler is not None:
                handler(event)
            processed.append(event)
        self.now = t_end
        self.log.extend(processed)
        return processed


def frame_latency_ms(n_bytes: int, baud: int, bits_per_byte: int = 10) -> int:
    """Wire time of an ``n_bytes`` frame, rounded up to whole milliseconds."""
    # integer ceil avoids float error at exact boundaries (240 B @ 9600 -> 250)
    return -(-n_bytes * bits_per_byte * 1000 // baud)


@dataclass
class SerialChannel:
    """Lossless, order-preserving UART link.

    A frame sent on an idle line arrives ``frame_latency_ms`` after it was
    sent.  Frames sent while the line is busy wait for the previous frame to
    finish, so frames never reorder.
    """

    sim: Simulator
    name: str
    target: str
    baud: int = 9600
    bits_per_byte: int = 10
    busy_until: SimTime = 0
    frames_sent: int = 0

    def __post_init__(self) -> None:
        if self.baud <= 0:
            raise ValueError("baud must be positive")
        if self.bits_per_byte <= 0:
            raise ValueError("bits_per_byte must be positive")

    def latency(self, n_bytes: int) -> int:
        return frame_latency_ms(n_bytes, self.baud, self.bits_per_byte)

    def transmit(self, frame: Any, n_bytes: int, at: SimTime) -> SimTime:
        """Put ``frame`` on the wire at ``at``; returns the delivery time."""
        if n_bytes <= 0:
            raise ValueError("frame must be non-empty")
        start = max(at, self.busy_until)
        delivered = start + self.latency(n_bytes)
        self.busy_until = delivered
        self.frames_sent += 1
        self.sim.schedule(Event(delivered, self.name, self.target, "imc", frame))
        return delivered


def transmit_time(n_bytes: int, baud: int, bits_per_byte: int = 10) -> float:
    """Exact (unrounded) wire time in ms, for reporting."""
    return n_bytes * bits_per_byte / baud * 1000.0

