"""Emulated main-microcontroller firmware.

The firmware is an event-driven state machine.  Work arrives as jobs (a CGM
reading triggers a basal job, an RF packet an RF job, a block notice an alert
job) and runs one job at a time.  Every IMC send is blocking: the job resumes
when the frame has left the UART, so reports and commands are serialised the
way a single-threaded MCU loop would serialise them.
"""

from __future__ import annotations

import json
import math
from collections import deque
from dataclasses import asdict, dataclass, field, fields
from enum import Enum
from pathlib import Path
from typing import Generator, NamedTuple

import numpy as np

from .messages import ActuatorCmd, BlockNotice, Heartbeat, MessageSizes, Mode, ProgramState, SensorSnoop, StateTransition
from .simcore import Event, SerialChannel, SimTime, Simulator

S = ProgramState


@dataclass(frozen=True)
class TherapyParams:
    carb_ratio: float = 12.0  # g/U
    correction_factor: float = 40.0  # mg/dL per U
    target_bg: float = 110.0  # mg/dL
    dia: float = 180.0  # min
    max_bolus: float = 15.0  # U
    max_basal_rate: float = 2.5  # U/h
    base_basal_rate: float = 1.0  # U/h
    basal_gain: float = 0.002  # U/h per mg/dL
    amount_max: int = 255  # pump units
    pump_unit: float = 0.1  # U per pump unit
    bg_low: float = 60.0
    bg_high: float = 300.0

    def __post_init__(self) -> None:
        for f in fields(self):
            value = getattr(self, f.name)
            if not (math.isfinite(value) and value > 0):
                raise ValueError(f"{f.name} must be finite and > 0")
        if self.max_bolus > self.amount_max * self.pump_unit + 1e-9:
            raise ValueError("max_bolus exceeds the pump command ceiling")
        if self.bg_low >= self.bg_high:
            raise ValueError("bg_low must be below bg_high")

    @classmethod
    def from_dict(cls, data: dict) -> TherapyParams:
        known = {f.name: f for f in fields(cls)}
        unknown = set(data) - set(known)
        if unknown:
            raise ValueError(f"unknown therapy parameters {sorted(unknown)}")
        return cls(**{k: (int(v) if k == "amount_max" else float(v)) for k, v in data.items()})

    @classmethod
    def from_file(cls, path: str | Path) -> TherapyParams:
        return cls.from_dict(json.loads(Path(path).read_text()))

    def to_dict(self) -> dict:
        return asdict(self)


class DoseKind(str, Enum):
    BASAL = "BASAL"
    BOLUS = "BOLUS"


@dataclass(frozen=True)
class DoseRecord:
    at: SimTime
    kind: DoseKind
    amount: float  # U
    cmd_id: int = -1


class PacketKind(str, Enum):
    BOLUS_REQUEST = "BOLUS_REQUEST"
    PARAM_UPDATE = "PARAM_UPDATE"
    EXPLOIT = "EXPLOIT"


@dataclass(frozen=True)
class RfPacket:
    kind: PacketKind
    carbs: float = 0.0
    dose: float | None = None  # explicit U; overrides the calculator
    payload_len: int = 16
    crafted_target: str | None = None
    params: dict | None = None

    @classmethod
    def from_dict(cls, data: dict) -> RfPacket:
        data = dict(data)
        data["kind"] = PacketKind(data["kind"])
        return cls(**data)

    def to_dict(self) -> dict:
        out = {k: v for k, v in asdict(self).items() if v is not None}
        out["kind"] = self.kind.value
        return out


def insulin_on_board(history: list[DoseRecord], now: SimTime, dia: float) -> float:
    """Bolus insulin still active at ``now``, with linear decay over ``dia`` minutes."""
    total = 0.0
    for dose in history:
        if dose.kind is not DoseKind.BOLUS:
            continue
        elapsed = (now - dose.at) / 60_000
        total += dose.amount * max(0.0, 1.0 - elapsed / dia)
    return total


def compute_bolus(carbs: float, current_bg: float, params: TherapyParams, iob: float) -> float:
    if carbs < 0 or current_bg < 0:
        raise ValueError("carbs and current_bg must be non-negative")
    raw = carbs / params.carb_ratio + (current_bg - params.target_bg) / params.correction_factor - iob
    return min(max(0.0, raw), params.max_bolus)


def compute_basal(cgm_history: list[tuple[SimTime, float]], dose_history: list[DoseRecord], params: TherapyParams) -> float:
    """Proportional basal rate (U/h) from the latest CGM reading."""
    if not cgm_history:
        raise ValueError("compute_basal needs at least one CGM sample")
    bg = cgm_history[-1][1]
    rate = params.base_basal_rate + params.basal_gain * (bg - params.target_bg)
    return min(max(0.0, rate), params.max_basal_rate)


class BgDecision(NamedTuple):
    error_raised: object
    warn_high: object
    warn_low: object
    computed_dose: object


def bg_decision(bg, params: TherapyParams = TherapyParams(), error_below: float = 0.0,
                high_above: float | None = None, low_below: float | None = None) -> BgDecision:
    """Alarm outputs for a BG reading; works on scalars and numpy arrays.

    The threshold keywords exist so that mutant firmwares can be built for
    the static checker.
    """
    hi = params.bg_high if high_above is None else high_above
    lo = params.bg_low if low_below is None else low_below
    bg = np.asarray(bg, dtype=float)
    error = bg < error_below
    valid = ~error
    dose = np.where(valid, np.clip((bg - params.target_bg) / params.correction_factor, 0.0, params.max_bolus), 0.0)
    return BgDecision(error, valid & (bg > hi), valid & (bg < lo), dose)


@dataclass(frozen=True)
class FirmwareTiming:
    heartbeat_period_ms: int = 60_000
    cgm_period_ms: int = 600_000
    param_buffer_len: int = 32
    sizes: MessageSizes = field(default_factory=MessageSizes)


Job = Generator[SimTime, None, None]


class Firmware:
    """Main-controller emulation attached to a simulator.

    Incoming event kinds: ``cgm`` (payload: reading), ``rf`` (RfPacket),
    ``imc`` (BlockNotice), ``disable``, ``enable``, ``reset``, plus the
    internal ``heartbeat`` and ``resume`` timers.
    """

    def __init__(
        self,
        sim: Simulator,
        imc: SerialChannel,
        therapy: TherapyParams = TherapyParams(),
        timing: FirmwareTiming = FirmwareTiming(),
        name: str = "firmware",
        snoop_target: str = "coprocessor",
    ) -> None:
        self.sim = sim
        self.imc = imc
        self.therapy = therapy
        self.timing = timing
        self.name = name
        self.snoop_target = snoop_target
        self.state = S.IDLE
        self.reported_state = S.IDLE
        self.enabled = True
        self.cgm_history: list[tuple[SimTime, float]] = []
        self.doses: list[DoseRecord] = []
        self.alarms: list[tuple[SimTime, str]] = []
        self.dropped: list[tuple[SimTime, str]] = []
        self.transitions: list[tuple[SimTime, ProgramState, ProgramState, bool]] = []
        self.commands: list[ActuatorCmd] = []
        self.heartbeats: list[SimTime] = []
        self._jobs: deque[Job] = deque()
        self._current: Job | None = None
        self._generation = 0
        self._hb_seq = 0
        self._cmd_seq = 0
        sim.register(name, self.handle)

    # lifecycle -----------------------------------------------------------

    def start(self) -> None:
        self._schedule_heartbeat(self.sim.now)

    def _schedule_heartbeat(self, origin: SimTime) -> None:
        self.sim.schedule(
            Event(origin + self.timing.heartbeat_period_ms, self.name, self.name, "heartbeat", self._generation)
        )

    def _reboot(self) -> None:
        self._generation += 1
        self._jobs.clear()
        self._current = None
        self.state = S.IDLE
        self.reported_state = S.IDLE
        self.enabled = True
        self._schedule_heartbeat(self.sim.now)

    # event dispatch ------------------------------------------------------

    def handle(self, event: Event) -> None:
        kind = event.kind
        if kind == "disable":
            self.enabled = False
            self._generation += 1
            self._jobs.clear()
            self._current = None
            return
        if kind in ("enable", "reset"):
            if kind == "enable" and self.enabled:
                return
            self._reboot()
            return
        if not self.enabled:
            return
        if kind == "heartbeat":
            if event.payload == self._generation:
                self._send_heartbeat()
        elif kind == "resume":
            if event.payload == self._generation:
                self._advance()
        elif kind == "cgm":
            self._on_cgm(event.payload)
        elif kind == "rf":
            self._enqueue(self._rf_job(event.payload))
        elif kind == "imc" and isinstance(event.payload, BlockNotice):
            self._on_block_notice(event.payload)

    def _send_heartbeat(self) -> None:
        self._hb_seq += 1
        now = self.sim.now
        msg = Heartbeat(self._hb_seq, sent_at=now, length=self.timing.sizes.heartbeat)
        self.imc.transmit(msg, msg.length, now)
        self.heartbeats.append(now)
        self._schedule_heartbeat(now)

    def _on_cgm(self, reading: float) -> None:
        now = self.sim.now
        self.cgm_history.append((now, reading))
        self._enqueue(self._basal_job())
        decision = bg_decision(reading, self.therapy)
        if bool(decision.error_raised):
            self._enqueue(self._alert_job("SENSOR ERROR"))
        elif bool(decision.warn_high):
            self._enqueue(self._alert_job("BG LEVEL VERY HIGH"))
        elif bool(decision.warn_low):
            self._enqueue(self._alert_job("BG LEVEL VERY LOW"))

    def _on_block_notice(self, notice: BlockNotice) -> None:
        self.doses = [d for d in self.doses if d.cmd_id != notice.cmd_id]
        self._enqueue(self._alert_job(f"command {notice.cmd_id} blocked by {notice.rule_id}"))

    # job machinery -------------------------------------------------------

    def _enqueue(self, job: Job) -> None:
        self._jobs.append(job)
        if self._current is None:
            self._advance()

    def _advance(self) -> None:
        while True:
            if self._current is None:
                if not self._jobs:
                    return
                self._current = self._jobs.popleft()
            try:
                resume_at = next(self._current)
            except StopIteration:
                self._current = None
                continue
            self.sim.schedule(Event(resume_at, self.name, self.name, "resume", self._generation))
            return

    def _transition(self, to: ProgramState, report: bool = True) -> Generator[SimTime, None, None]:
        frm = self.state
        self.state = to
        self.transitions.append((self.sim.now, frm, to, report))
        if report:
            self.reported_state = to
            now = self.sim.now
            msg = StateTransition(frm, to, sent_at=now, length=self.timing.sizes.transition)
            yield self.imc.transmit(msg, msg.length, now)

    def _pump_command(self, amount: int, mode: Mode) -> Generator[SimTime, None, ActuatorCmd]:
        self._cmd_seq += 1
        now = self.sim.now
        cmd = ActuatorCmd("pump", amount, mode, cmd_id=self._cmd_seq, sent_at=now, length=self.timing.sizes.command)
        self.commands.append(cmd)
        yield self.imc.transmit(cmd, cmd.length, now)
        return cmd

    def _snoop_rf(self) -> None:
        self.sim.schedule(Event(self.sim.now, self.name, self.snoop_target, "snoop", SensorSnoop("rf", sent_at=self.sim.now)))

    def _to_pump_units(self, units: float) -> int:
        return min(self.therapy.amount_max, int(round(units / self.therapy.pump_unit)))

    # jobs ----------------------------------------------------------------

    def _basal_job(self) -> Job:
        yield from self._transition(S.COMPUTE_BASAL)
        rate = compute_basal(self.cgm_history, self.doses, self.therapy)
        yield from self._transition(S.INFUSE_INSULIN)
        cmd = yield from self._pump_command(self._to_pump_units(rate), Mode.BASAL)
        per_cycle = cmd.amount * self.therapy.pump_unit * self.timing.cgm_period_ms / 3_600_000
        if per_cycle > 0:
            self.doses.append(DoseRecord(cmd.sent_at, DoseKind.BASAL, per_cycle, cmd.cmd_id))
        yield from self._transition(S.IDLE)

    def _alert_job(self, text: str) -> Job:
        yield from self._transition(S.ALERT)
        self.alarms.append((self.sim.now, text))
        yield from self._transition(S.IDLE)

    def _rf_job(self, packet: RfPacket) -> Job:
        yield from self._transition(S.RF_ACCESS)
        self._snoop_rf()
        if packet.kind is PacketKind.EXPLOIT or (
            packet.kind is PacketKind.PARAM_UPDATE and packet.payload_len > self.timing.param_buffer_len
        ):
            if packet.crafted_target == "infuse_insulin_clamp":
                yield from self._exploit()
                return
            self.dropped.append((self.sim.now, f"overlong {packet.kind.value} ({packet.payload_len} B)"))
        elif packet.kind is PacketKind.BOLUS_REQUEST:
            if packet.carbs >= 0 and (packet.dose is None or packet.dose >= 0):
                yield from self._bolus(packet)
                return
            self.dropped.append((self.sim.now, "malformed bolus request"))
        elif packet.kind is PacketKind.PARAM_UPDATE:
            self._apply_params(packet.params or {})
        yield from self._transition(S.IDLE)

    def _apply_params(self, update: dict) -> None:
        try:
            merged = self.therapy.to_dict() | update
            self.therapy = TherapyParams.from_dict(merged)
        except (TypeError, ValueError) as exc:
            self.dropped.append((self.sim.now, f"bad parameter update: {exc}"))

    def _bolus(self, packet: RfPacket) -> Job:
        yield from self._transition(S.COMPUTE_BOLUS)
        now = self.sim.now
        if packet.dose is not None:
            dose = min(packet.dose, self.therapy.max_bolus)
        else:
            bg = self.cgm_history[-1][1] if self.cgm_history else self.therapy.target_bg
            iob = insulin_on_board(self.doses, now, self.therapy.dia)
            dose = compute_bolus(packet.carbs, bg, self.therapy, iob)
        amount = self._to_pump_units(dose)
        yield from self._transition(S.INFUSE_INSULIN)
        if amount > 0:
            cmd = yield from self._pump_command(amount, Mode.BOLUS)
            self.doses.append(DoseRecord(cmd.sent_at, DoseKind.BOLUS, amount * self.therapy.pump_unit, cmd.cmd_id))
        yield from self._transition(S.IDLE)

    def _exploit(self) -> Job:
        # Control lands on the clamp line of infuseInsulin(): amount = AMOUNT_MAX,
        # then writeToPump().  No state reports are emitted on this path.
        yield from self._transition(S.INFUSE_INSULIN, report=False)
        yield from self._pump_command(self.therapy.amount_max, Mode.BOLUS)
        yield from self._transition(S.IDLE, report=False)
