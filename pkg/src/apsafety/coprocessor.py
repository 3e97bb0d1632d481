"""Safety coprocessor: rule checking over IMC traffic and snooped I/O.

``Coprocessor`` holds the rule state and turns observations into verdicts; it
never touches the simulator.  ``CoprocessorNode`` wires it into a simulation:
it receives frames and snoops, runs the periodic scheduler tick, forwards
allowed pump commands and carries out follow-up actions.
"""

from __future__ import annotations

from collections import deque
from dataclasses import dataclass, replace
from enum import Enum

from .messages import ActuatorCmd, BlockNotice, Heartbeat, MessageSizes, Mode, ProgramState, SensorSnoop, StateTransition
from .rules import (
    IO_ACCESS,
    PHYSIOLOGICAL,
    STATE_TRANSITION,
    TIME_TRIGGERED,
    BgRange,
    ExpectBgRiseAfterBolus,
    HeartbeatTimeout,
    IoAccessRule,
    MaxBasalRate,
    MaxBolus,
    MinBolusInterval,
    SafetyRule,
    StateTransitionRule,
    WarnBgRiseNoBolus,
)
from .simcore import Event, SerialChannel, SimTime, Simulator

S = ProgramState

PROTOCOL_RULE = "imc-protocol"
CONTEXT_RULE = "physio-context"
EMERGENCY_RULE = "emergency-basal"


class Decision(str, Enum):
    ALLOW = "ALLOW"
    BLOCK = "BLOCK"
    WARN = "WARN"
    RESET_MAIN = "RESET_MAIN"


@dataclass(frozen=True)
class Verdict:
    at: SimTime
    rule_id: str
    decision: Decision
    detail: str
    trigger: str
    category: str = ""
    cmd_id: int | None = None
    state: ProgramState | None = None  # tracked firmware state when the triggering message arrived

    def line(self) -> str:
        """One record of the decoded verdict log."""
        return f"{self.at}\t{self.rule_id}\t{self.decision.value}\t{self.detail}"


@dataclass
class _RiseWatch:
    at: SimTime
    bg_at_infusion: float
    running_min: float


class Coprocessor:
    """Rule state machine of the safety coprocessor."""

    def __init__(self, rules: list[SafetyRule], pump_unit: float = 0.1, start: SimTime = 0) -> None:
        self.rules = list(rules)
        self.pump_unit = pump_unit
        self._io: dict[str, IoAccessRule] = {}
        self._st: StateTransitionRule | None = None
        self._min_interval: MinBolusInterval | None = None
        self._max_bolus: MaxBolus | None = None
        self._max_basal: MaxBasalRate | None = None
        self._bg_range: BgRange | None = None
        self._expect_rise: ExpectBgRiseAfterBolus | None = None
        self._rise_no_bolus: WarnBgRiseNoBolus | None = None
        self._watchdog: HeartbeatTimeout | None = None
        for rule in self.rules:
            match rule:
                case IoAccessRule():
                    self._io[rule.device] = rule
                case StateTransitionRule():
                    self._st = rule
                case MinBolusInterval():
                    self._min_interval = rule
                case MaxBolus():
                    self._max_bolus = rule
                case MaxBasalRate():
                    self._max_basal = rule
                case BgRange():
                    self._bg_range = rule
                case ExpectBgRiseAfterBolus():
                    self._expect_rise = rule
                case WarnBgRiseNoBolus():
                    self._rise_no_bolus = rule
                case HeartbeatTimeout():
                    self._watchdog = rule
                case _:
                    raise TypeError(f"unsupported rule {rule!r}")

        self.tracked_state = S.IDLE
        self.entered_at = start
        self.infuse_context: ProgramState | None = None
        self._dwell_warned = False
        self._entry_times: dict[ProgramState, deque[SimTime]] = {s: deque() for s in ProgramState}
        self._access_count: dict[str, int] = {}
        self._access_times: dict[str, deque[SimTime]] = {}

        self.samples: list[tuple[SimTime, float]] = []
        self._evaluated = 0
        self.boluses: list[tuple[SimTime, float]] = []
        self._watches: list[_RiseWatch] = []

        self.last_heartbeat = start
        self._watchdog_fired = False
        self.log: list[Verdict] = []

    # entry points -------------------------------------------------------

    def on_imc_message(self, msg, now: SimTime) -> list[Verdict]:
        state = self.tracked_state
        verdicts: list[Verdict] = []
        match msg:
            case Heartbeat():
                self.last_heartbeat = now
                self._watchdog_fired = False
            case StateTransition():
                v = self.check_state_transition(msg.from_state, msg.to_state, now)
                if v.decision is not Decision.ALLOW:
                    verdicts.append(v)
            case ActuatorCmd():
                verdicts.append(self.check_io_access(msg.device, now, msg))
            case SensorSnoop(device="cgm"):
                verdicts.extend(self.check_physio_bg_level(msg.bg_reading, now))
            case SensorSnoop():
                v = self.check_io_access(msg.device, now)
                if v.decision is not Decision.ALLOW:
                    verdicts.append(v)
            case _:
                verdicts.append(
                    Verdict(now, PROTOCOL_RULE, Decision.WARN, f"unknown message {type(msg).__name__}", repr(msg))
                )
        verdicts = [replace(v, state=state) for v in verdicts]
        verdicts.extend(self._tick(now))
        self.log.extend(verdicts)
        return verdicts

    def tick(self, now: SimTime) -> list[Verdict]:
        verdicts = self._tick(now)
        self.log.extend(verdicts)
        return verdicts

    # state transition rules --------------------------------------------

    def check_state_transition(self, from_state: ProgramState, to_state: ProgramState, now: SimTime) -> Verdict:
        rule = self._st
        trigger = f"STATE_TRANSITION {from_state.value}->{to_state.value}"
        problems: list[str] = []
        if rule is not None:
            if from_state is not self.tracked_state:
                problems.append(f"reported {from_state.value}->{to_state.value} while tracking {self.tracked_state.value}")
            elif (from_state, to_state) not in rule.legal_edges:
                problems.append(f"illegal transition {from_state.value}->{to_state.value}")
        # resynchronise on the reported target even after an anomaly
        self._enter(to_state, from_state, now)
        if rule is not None and to_state in rule.max_entry_frequency:
            count, window = rule.max_entry_frequency[to_state]
            times = self._entry_times[to_state]
            if _over_budget(times, now, count, window):
                problems.append(f"{to_state.value} entered {len(times)} times within {window} ms")
        rule_id = rule.id if rule is not None else "state-transition"
        if problems:
            return Verdict(now, rule_id, Decision.WARN, "; ".join(problems), trigger, STATE_TRANSITION)
        return Verdict(now, rule_id, Decision.ALLOW, "legal transition", trigger, STATE_TRANSITION)

    def _enter(self, state: ProgramState, from_state: ProgramState | None, now: SimTime) -> None:
        self.tracked_state = state
        self.entered_at = now
        self._dwell_warned = False
        self._access_count.clear()
        self._entry_times[state].append(now)
        if state is S.INFUSE_INSULIN and from_state in (S.COMPUTE_BASAL, S.COMPUTE_BOLUS):
            self.infuse_context = from_state
        else:
            self.infuse_context = None

    # I/O access rules ---------------------------------------------------

    def check_io_access(self, device: str, now: SimTime, command: ActuatorCmd | None = None) -> Verdict:
        """Access-permission check; pump commands continue to the physiological check.

        Every rule is evaluated even after a failure so that removing one rule
        never hides the violation of another.
        """
        count = self._access_count.get(device, 0) + 1
        self._access_count[device] = count
        times = self._access_times.setdefault(device, deque())
        times.append(now)
        rule = self._io.get(device)
        failures: list[tuple[str, str, str]] = []
        if rule is not None:
            if self.tracked_state not in rule.allowed_states:
                failures.append((rule.id, IO_ACCESS, f"{device} accessed from {self.tracked_state.value} state"))
            if rule.max_accesses_per_entry is not None and count > rule.max_accesses_per_entry:
                failures.append((rule.id, IO_ACCESS, f"{device} accessed {count} times in one {self.tracked_state.value} entry"))
            if rule.max_access_frequency is not None:
                budget, window = rule.max_access_frequency
                if _over_budget(times, now, budget, window):
                    failures.append((rule.id, IO_ACCESS, f"{device} accessed {len(times)} times within {window} ms"))
        rule_id = rule.id if rule is not None else f"io-{device}"

        if command is None:
            if failures:
                return Verdict(now, failures[0][0], Decision.WARN, "; ".join(f[2] for f in failures), f"SNOOP {device}", IO_ACCESS)
            return Verdict(now, rule_id, Decision.ALLOW, "passive access", f"SNOOP {device}", IO_ACCESS)

        trigger = f"ACTUATOR_CMD {device} amount={command.amount} mode={command.mode.value} id={command.cmd_id}"
        mode = self.infer_mode()
        amount_u = round(command.amount * self.pump_unit, 9)
        failures.extend((rid, PHYSIOLOGICAL, text) for rid, text in self._physio_failures(mode, amount_u, now))
        if failures:
            first_id, category, _ = failures[0]
            detail = "; ".join(f[2] for f in failures)
            return Verdict(now, first_id, Decision.BLOCK, detail, trigger, category, command.cmd_id)
        if mode is Mode.BOLUS:
            self._register_bolus(now, amount_u)
        return Verdict(now, rule_id, Decision.ALLOW, f"{mode.value} {amount_u:g} {'U/h' if mode is Mode.BASAL else 'U'} forwarded", trigger, IO_ACCESS, command.cmd_id)

    def infer_mode(self) -> Mode:
        """Infusion mode from the state that preceded INFUSE_INSULIN; bolus when unknown."""
        if self.tracked_state is S.INFUSE_INSULIN and self.infuse_context is S.COMPUTE_BASAL:
            return Mode.BASAL
        return Mode.BOLUS

    # physiological rules ------------------------------------------------

    def check_physio_infusion(self, mode: Mode, amount: float, now: SimTime) -> Verdict:
        """Dose limits for the inferred mode.  Does not change any state."""
        failures = self._physio_failures(mode, amount, now)
        trigger = f"{mode.value} {amount:g} U"
        if failures:
            detail = "; ".join(text for _, text in failures)
            return Verdict(now, failures[0][0], Decision.BLOCK, detail, trigger, PHYSIOLOGICAL)
        return Verdict(now, "physiological", Decision.ALLOW, "within limits", trigger, PHYSIOLOGICAL)

    def _physio_failures(self, mode: Mode, amount: float, now: SimTime) -> list[tuple[str, str]]:
        failures: list[tuple[str, str]] = []
        if not self.samples:
            failures.append((CONTEXT_RULE, "no physiological context (no BG reading yet)"))
        if mode is Mode.BOLUS:
            if self._max_bolus is not None and amount > self._max_bolus.units:
                failures.append((self._max_bolus.id, f"bolus {amount:g} U exceeds {self._max_bolus.units:g} U"))
            if self._min_interval is not None and self.boluses:
                since = (now - self.boluses[-1][0]) / 60_000
                if since < self._min_interval.minutes:
                    failures.append(
                        (self._min_interval.id, f"bolus {since:.1f} min after previous, minimum {self._min_interval.minutes:g} min")
                    )
        elif self._max_basal is not None and amount > self._max_basal.units_per_hour:
            failures.append((self._max_basal.id, f"basal {amount:g} U/h exceeds {self._max_basal.units_per_hour:g} U/h"))
        return failures

    def _register_bolus(self, now: SimTime, amount: float) -> None:
        self.boluses.append((now, amount))
        if self._expect_rise is not None and self.samples:
            bg = self.samples[-1][1]
            self._watches.append(_RiseWatch(now, bg, bg))

    def check_physio_bg_level(self, bg: float | None, now: SimTime) -> list[Verdict]:
        rule = self._bg_range
        rid = rule.id if rule is not None else "bg-range"
        trigger = f"SENSOR_SNOOP bg={bg}"
        if bg is None or bg < 0:
            return [Verdict(now, rid, Decision.WARN, "sensor error: BG reading below zero", trigger, PHYSIOLOGICAL)]
        verdicts: list[Verdict] = []
        if self.samples and self.samples[-1][0] > now:
            verdicts.append(Verdict(now, rid, Decision.WARN, "sensor error: sample out of order", trigger, PHYSIOLOGICAL))
            return verdicts
        if rule is not None:
            if bg > rule.hi:
                verdicts.append(Verdict(now, rid, Decision.WARN, "BG LEVEL VERY HIGH", trigger, PHYSIOLOGICAL))
            elif bg < rule.lo:
                verdicts.append(Verdict(now, rid, Decision.WARN, "BG LEVEL VERY LOW", trigger, PHYSIOLOGICAL))
            if self.samples and now > self.samples[-1][0]:
                t0, bg0 = self.samples[-1]
                rate = (bg - bg0) / ((now - t0) / 60_000)
                if abs(rate) > rule.max_rate:
                    verdicts.append(
                        Verdict(now, rid, Decision.WARN, f"BG changing at {rate:+.1f} mg/dL/min", trigger, PHYSIOLOGICAL)
                    )
        self.samples.append((now, bg))
        return verdicts

    # time-triggered rules -----------------------------------------------

    def _tick(self, now: SimTime) -> list[Verdict]:
        verdicts: list[Verdict] = []
        while self._evaluated < len(self.samples):
            t, bg = self.samples[self._evaluated]
            self._evaluated += 1
            verdicts.extend(self._bg_predicates(t, bg, now))

        hb = self._watchdog
        if hb is not None and not self._watchdog_fired and now >= self.watchdog_deadline():
            self._watchdog_fired = True
            detail = f"no heartbeat for {hb.units} periods (last at {self.last_heartbeat} ms)"
            verdicts.append(Verdict(now, hb.id, Decision.WARN, detail, "watchdog", TIME_TRIGGERED))
            if hb.reset_main:
                verdicts.append(Verdict(now, hb.id, Decision.RESET_MAIN, "main controller unresponsive", "watchdog", TIME_TRIGGERED))

        deadline = self.dwell_deadline()
        if deadline is not None and not self._dwell_warned and now >= deadline:
            self._dwell_warned = True
            detail = f"dwell in {self.tracked_state.value} exceeded {deadline - self.entered_at} ms"
            verdicts.append(Verdict(now, self._st.id, Decision.WARN, detail, "dwell timer", STATE_TRANSITION))
        return verdicts

    def _bg_predicates(self, t: SimTime, bg: float, now: SimTime) -> list[Verdict]:
        verdicts: list[Verdict] = []
        rule = self._expect_rise
        if rule is not None:
            kept: list[_RiseWatch] = []
            for w in self._watches:
                if t <= w.at:
                    kept.append(w)
                    continue
                if t - w.at > rule.window * 60_000 or bg >= w.running_min + rule.rise_margin:
                    continue
                w.running_min = min(w.running_min, bg)
                if bg < w.bg_at_infusion - rule.drop_threshold:
                    detail = f"BG {bg:.1f} fell {w.bg_at_infusion - bg:.1f} mg/dL since bolus at {w.at} ms; eat carbohydrates"
                    verdicts.append(Verdict(now, rule.id, Decision.WARN, detail, f"sample {t} ms", TIME_TRIGGERED))
                kept.append(w)
            self._watches = kept

        rule2 = self._rise_no_bolus
        if rule2 is not None:
            span = rule2.window * 60_000
            window = [(v, ts) for ts, v in self.samples if t - span <= ts < t]
            if window:
                low, onset = min(window, key=lambda x: (x[0], -x[1]))
                # a bolus up to one window before the rise began covers it
                covered = any(onset - span <= bt <= t for bt, _ in self.boluses)
                if not covered and bg - low > rule2.rise_threshold:
                    detail = f"BG rose {bg - low:.1f} mg/dL within {rule2.window:g} min with no bolus"
                    verdicts.append(Verdict(now, rule2.id, Decision.WARN, detail, f"sample {t} ms", TIME_TRIGGERED))
        return verdicts

    def watchdog_deadline(self) -> SimTime:
        hb = self._watchdog
        return self.last_heartbeat + hb.units * hb.period_ms

    def dwell_deadline(self) -> SimTime | None:
        if self._st is None:
            return None
        limit = self._st.max_dwell.get(self.tracked_state)
        return None if limit is None else self.entered_at + limit

    def next_deadline(self) -> SimTime | None:
        candidates = []
        if self._watchdog is not None and not self._watchdog_fired:
            candidates.append(self.watchdog_deadline())
        dwell = self.dwell_deadline()
        if dwell is not None and not self._dwell_warned:
            candidates.append(dwell)
        return min(candidates) if candidates else None

    # follow-up ----------------------------------------------------------

    def follow_up(self, verdict: Verdict) -> list[str]:
        match verdict.decision:
            case Decision.BLOCK:
                return ["drop_command", "notify_main", "alarm"]
            case Decision.WARN:
                return ["alarm"]
            case Decision.RESET_MAIN:
                return ["reset_main", "alarm"]
        return []

    def reset_main(self, now: SimTime) -> None:
        self._enter(S.IDLE, None, now)
        self.last_heartbeat = now
        self._watchdog_fired = False


def _over_budget(times: deque[SimTime], now: SimTime, count: int, window: int) -> bool:
    while times and times[0] <= now - window:
        times.popleft()
    return len(times) > count


class CoprocessorNode:
    """Simulation component around a ``Coprocessor``.

    Event kinds: ``imc`` (frame from the main controller), ``snoop``
    (directly observed bus traffic), ``tick`` (scheduler quantum) and
    ``deadline`` (exact time-triggered rule deadline).
    """

    def __init__(
        self,
        sim: Simulator,
        core: Coprocessor,
        to_main: SerialChannel,
        processing_ms: int = 3,
        quantum_ms: int = 60_000,
        sizes: MessageSizes = MessageSizes(),
        emergency_basal_rate: float | None = None,
        name: str = "coprocessor",
        pump_target: str = "pump",
        main_target: str = "firmware",
    ) -> None:
        self.sim = sim
        self.core = core
        self.to_main = to_main
        self.processing_ms = processing_ms
        self.quantum_ms = quantum_ms
        self.sizes = sizes
        self.emergency_basal_rate = emergency_basal_rate
        self.name = name
        self.pump_target = pump_target
        self.main_target = main_target
        self.alarms: list[tuple[SimTime, str, str]] = []
        self.trace: list[tuple[SimTime, object]] = []
        self.forwarded: list[tuple[SimTime, ActuatorCmd, Verdict]] = []
        self._armed: set[SimTime] = set()
        self._emergency_seq = 0
        sim.register(name, self.handle)

    def start(self) -> None:
        self.sim.schedule(Event(self.sim.now, self.name, self.name, "tick"))
        self._arm_deadline()

    def handle(self, event: Event) -> None:
        now = self.sim.now
        if event.kind in ("imc", "snoop"):
            msg = event.payload
            self.trace.append((now, msg))
            for verdict in self.core.on_imc_message(msg, now):
                self._act(verdict, msg)
        elif event.kind in ("tick", "deadline"):
            if event.kind == "tick":
                self.sim.schedule(Event(now + self.quantum_ms, self.name, self.name, "tick"))
            else:
                self._armed.discard(now)
            for verdict in self.core.tick(now):
                self._act(verdict, None)
        self._arm_deadline()

    def _arm_deadline(self) -> None:
        deadline = self.core.next_deadline()
        if deadline is not None and deadline not in self._armed:
            self._armed.add(deadline)
            self.sim.schedule(Event(max(deadline, self.sim.now), self.name, self.name, "deadline"))

    def _act(self, verdict: Verdict, msg) -> None:
        now = self.sim.now
        if verdict.decision is Decision.ALLOW:
            if isinstance(msg, ActuatorCmd):
                self._forward(msg, verdict)
            return
        for action in self.core.follow_up(verdict):
            if action == "alarm":
                self.alarms.append((now, verdict.rule_id, verdict.detail))
            elif action == "notify_main" and verdict.cmd_id is not None:
                notice = BlockNotice(verdict.cmd_id, verdict.rule_id, sent_at=now, length=self.sizes.notice)
                self.to_main.transmit(notice, notice.length, now)
            elif action == "reset_main":
                self.trace.append((now, "RESET"))
                self.core.reset_main(now)
                self.sim.schedule(Event(now, self.name, self.main_target, "reset"))
                if self.emergency_basal_rate is not None:
                    self._emergency_basal(now)

    def _forward(self, cmd: ActuatorCmd, verdict: Verdict) -> None:
        at = self.sim.now + self.processing_ms
        self.forwarded.append((at, cmd, verdict))
        self.sim.schedule(Event(at, self.name, self.pump_target, "command", (cmd, verdict)))

    def _emergency_basal(self, now: SimTime) -> None:
        self._emergency_seq += 1
        amount = int(round(self.emergency_basal_rate / self.core.pump_unit))
        cmd = ActuatorCmd("pump", amount, Mode.BASAL, cmd_id=-self._emergency_seq, sent_at=now)
        verdict = Verdict(now, EMERGENCY_RULE, Decision.ALLOW, f"emergency basal {self.emergency_basal_rate:g} U/h", "reset", PHYSIOLOGICAL, cmd.cmd_id)
        self.core.log.append(verdict)
        self._forward(cmd, verdict)
