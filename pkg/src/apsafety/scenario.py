"""Scenario scripts, the closed-loop test bench and scenario reports.

A script is a JSON document::

    {"name": "S4", "title": "buffer-overflow", "duration_min": 180,
     "actions": [{"at_min": 60.5, "action": "rf_packet",
                  "packet": {"kind": "EXPLOIT", "payload_len": 64,
                             "crafted_target": "infuse_insulin_clamp"}}],
     "overrides": {"patient": {}, "therapy": {}, "rules": {}, "timing": {}}}

Actions: ``rf_packet``, ``meal`` (``grams``), ``disable_firmware`` and
``enable_firmware``.
"""

from __future__ import annotations

import csv
import hashlib
import io
import json
from dataclasses import dataclass, field, fields, replace
from importlib import resources
from pathlib import Path

import numpy as np

from .coprocessor import Coprocessor, CoprocessorNode, Decision, Verdict
from .firmware import Firmware, FirmwareTiming, PacketKind, RfPacket, TherapyParams
from .messages import ActuatorCmd, MessageSizes, Mode, ProgramState, SensorSnoop, StateTransition
from .patient import PatientParams, PatientState, equilibrium, sample_cgm, step, with_overrides
from .rules import (
    IoAccessRule,
    MaxBasalRate,
    MaxBolus,
    MinBolusInterval,
    SafetyRule,
    default_rules,
    rule_from_dict,
    rule_to_dict,
)
from .simcore import MS_PER_MIN, Event, SerialChannel, SimTime, Simulator, minutes

ACTIONS = ("rf_packet", "meal", "disable_firmware", "enable_firmware")


class ScriptError(ValueError):
    """Invalid scenario script."""


@dataclass(frozen=True)
class SystemTiming:
    cgm_period_min: float = 10.0
    heartbeat_period_ms: int = 60_000
    quantum_ms: int = 60_000
    baud: int = 9600
    bits_per_byte: int = 10
    processing_ms: int = 3
    basal_period_min: float = 15.0  # a basal command stays in force this long unless superseded
    param_buffer_len: int = 32
    emergency_basal_rate: float | None = None

    @classmethod
    def from_dict(cls, data: dict) -> SystemTiming:
        known = {f.name for f in fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise ScriptError(f"unknown timing fields {sorted(unknown)}")
        return cls(**data)


@dataclass(frozen=True)
class Action:
    at_min: float
    action: str
    packet: RfPacket | None = None
    grams: float = 0.0

    def to_dict(self) -> dict:
        out: dict = {"at_min": self.at_min, "action": self.action}
        if self.packet is not None:
            out["packet"] = self.packet.to_dict()
        if self.action == "meal":
            out["grams"] = self.grams
        return out


@dataclass(frozen=True)
class ScenarioScript:
    name: str
    duration_min: float
    actions: tuple[Action, ...] = ()
    title: str = ""
    description: str = ""
    overrides: dict = field(default_factory=dict)

    def validate(self) -> None:
        if self.duration_min <= 0:
            raise ScriptError(f"{self.name}: duration must be positive")
        for a in self.actions:
            if a.action not in ACTIONS:
                raise ScriptError(f"{self.name}: unknown action {a.action!r}")
            if not 0 <= a.at_min <= self.duration_min:
                raise ScriptError(f"{self.name}: action at {a.at_min} min outside [0, {self.duration_min}]")
            if a.action == "rf_packet" and a.packet is None:
                raise ScriptError(f"{self.name}: rf_packet without packet")
            if a.action == "meal" and a.grams <= 0:
                raise ScriptError(f"{self.name}: meal needs positive grams")
        unknown = set(self.overrides) - {"patient", "therapy", "rules", "timing"}
        if unknown:
            raise ScriptError(f"{self.name}: unknown override sections {sorted(unknown)}")

    @classmethod
    def from_dict(cls, data: dict) -> ScenarioScript:
        try:
            actions = tuple(
                Action(
                    at_min=float(a["at_min"]),
                    action=a["action"],
                    packet=RfPacket.from_dict(a["packet"]) if "packet" in a else None,
                    grams=float(a.get("grams", 0.0)),
                )
                for a in data.get("actions", [])
            )
            script = cls(
                name=data["name"],
                duration_min=float(data["duration_min"]),
                actions=actions,
                title=data.get("title", ""),
                description=data.get("description", ""),
                overrides=data.get("overrides", {}),
            )
        except (KeyError, TypeError, ValueError) as exc:
            raise ScriptError(f"malformed script: {exc}") from exc
        script.validate()
        return script

    @classmethod
    def from_file(cls, path: str | Path) -> ScenarioScript:
        return cls.from_dict(json.loads(Path(path).read_text()))

    def to_dict(self) -> dict:
        return {
            "name": self.name,
            "title": self.title,
            "description": self.description,
            "duration_min": self.duration_min,
            "actions": [a.to_dict() for a in self.actions],
            "overrides": self.overrides,
        }


def builtin_scenarios() -> list[ScenarioScript]:
    """The five case-study scripts shipped as data files."""
    root = resources.files("apsafety") / "scenarios"
    scripts = [
        ScenarioScript.from_dict(json.loads(p.read_text()))
        for p in sorted(root.iterdir(), key=lambda p: p.name)
        if p.name.endswith(".json")
    ]
    return scripts


def find_scenario(name: str) -> ScenarioScript:
    for script in builtin_scenarios():
        if name in (script.name, script.title):
            return script
    raise KeyError(name)


# plant ------------------------------------------------------------------


class PatientPlant:
    """Patient model advanced lazily up to the time of each interaction."""

    def __init__(self, sim: Simulator, params: PatientParams, state: PatientState, name: str = "plant") -> None:
        self.sim = sim
        self.params = params
        self.state = state
        self.basal_rate = 0.0
        self.basal_cmd: int | None = None
        self.delivered: dict[int, float] = {}
        self.total_delivered = 0.0
        self.bolus_log: list[tuple[SimTime, int, float]] = []
        self.meals: list[tuple[SimTime, float]] = []
        self.min_compartment = min(state.compartments())
        self._pending_insulin = 0.0
        self._pending_carbs = 0.0
        self.name = name
        sim.register(name, self.handle)

    def handle(self, event: Event) -> None:
        if event.kind == "meal":
            self.advance_to(self.sim.now)
            self._pending_carbs += event.payload
            self.meals.append((self.sim.now, event.payload))

    def advance_to(self, t: SimTime) -> None:
        while self.state.time < t:
            dt_ms = min(MS_PER_MIN, t - self.state.time)
            new = step(
                self.state, self.params, dt_ms / MS_PER_MIN,
                insulin_in=self._pending_insulin, carbs_in=self._pending_carbs, basal_rate=self.basal_rate,
                clamp=False,
            )
            raw_min = min(new.compartments())
            self.min_compartment = min(self.min_compartment, raw_min)
            if raw_min < 0:
                new = step(
                    self.state, self.params, dt_ms / MS_PER_MIN,
                    insulin_in=self._pending_insulin, carbs_in=self._pending_carbs, basal_rate=self.basal_rate,
                )
            if self.basal_cmd is not None and self.basal_rate > 0:
                units = self.basal_rate * dt_ms / 3_600_000
                self.delivered[self.basal_cmd] = self.delivered.get(self.basal_cmd, 0.0) + units
                self.total_delivered += units
            self._pending_insulin = self._pending_carbs = 0.0
            self.state = replace(new, time=self.state.time + dt_ms)

    def bolus(self, units: float, cmd_id: int) -> None:
        self.advance_to(self.sim.now)
        self._pending_insulin += units
        self.delivered[cmd_id] = self.delivered.get(cmd_id, 0.0) + units
        self.total_delivered += units
        self.bolus_log.append((self.sim.now, cmd_id, units))

    def set_basal(self, rate: float, cmd_id: int | None) -> None:
        self.advance_to(self.sim.now)
        self.basal_rate = rate
        self.basal_cmd = cmd_id


class Pump:
    """Pump driver.  Only the coprocessor can reach it.

    Refuses (raises) any command that does not come with an ALLOW verdict for
    the same command id, which instruments interception completeness.
    """

    def __init__(self, sim: Simulator, plant: PatientPlant, pump_unit: float, basal_period_ms: int, name: str = "pump") -> None:
        self.sim = sim
        self.plant = plant
        self.pump_unit = pump_unit
        self.basal_period_ms = basal_period_ms
        self.received: list[tuple[SimTime, ActuatorCmd, Verdict]] = []
        self._basal_token = 0
        self.name = name
        sim.register(name, self.handle)

    def handle(self, event: Event) -> None:
        if event.kind == "command":
            cmd, verdict = event.payload
            if verdict.decision is not Decision.ALLOW or verdict.cmd_id != cmd.cmd_id:
                raise AssertionError(f"pump reached without ALLOW verdict: {cmd}")
            self.received.append((self.sim.now, cmd, verdict))
            units = cmd.amount * self.pump_unit
            if cmd.mode is Mode.BOLUS:
                if units > 0:
                    self.plant.bolus(units, cmd.cmd_id)
            else:
                self._basal_token += 1
                self.plant.set_basal(units, cmd.cmd_id)
                self.sim.schedule(Event(self.sim.now + self.basal_period_ms, self.name, self.name, "basal_expire", self._basal_token))
        elif event.kind == "basal_expire" and event.payload == self._basal_token:
            self.plant.set_basal(0.0, None)


class Cgm:
    def __init__(self, sim: Simulator, plant: PatientPlant, period_ms: int, seed: int,
                 firmware_target: str = "firmware", snoop_target: str = "coprocessor", name: str = "cgm") -> None:
        self.sim = sim
        self.plant = plant
        self.period_ms = period_ms
        self.seed = seed
        self.firmware_target = firmware_target
        self.snoop_target = snoop_target
        self.samples: list[tuple[SimTime, float, float]] = []  # (t, true bg, reading)
        self.insulin_totals: list[float] = []  # cumulative U delivered at each sample
        self.name = name
        sim.register(name, self.handle)

    def start(self) -> None:
        self.sim.schedule(Event(self.sim.now, self.name, self.name, "sample"))

    def handle(self, event: Event) -> None:
        now = self.sim.now
        self.plant.advance_to(now)
        sample = sample_cgm(self.plant.state, self.plant.params.noise_sd, (self.seed, len(self.samples)))
        reading = round(sample.bg_reading, 1)
        self.samples.append((now, self.plant.state.bg, reading))
        self.insulin_totals.append(self.plant.total_delivered)
        self.sim.schedule(Event(now, self.name, self.snoop_target, "snoop", SensorSnoop("cgm", reading, sent_at=now)))
        self.sim.schedule(Event(now, self.name, self.firmware_target, "cgm", reading))
        self.sim.schedule(Event(now + self.period_ms, self.name, self.name, "sample"))


# configuration ------------------------------------------------------------


def apply_rule_overrides(rules: list[SafetyRule], overrides: dict) -> list[SafetyRule]:
    if not overrides:
        return list(rules)
    out = []
    by_id = {r.id: r for r in rules}
    unknown = set(overrides) - set(by_id)
    if unknown:
        raise ScriptError(f"rule overrides for unknown ids {sorted(unknown)}")
    for rule in rules:
        if rule.id in overrides:
            patch = overrides[rule.id]
            if patch is None:
                continue  # rule disabled
            out.append(rule_from_dict(rule_to_dict(rule) | patch))
        else:
            out.append(rule)
    return out


@dataclass
class Bench:
    """All components of one simulation run."""

    sim: Simulator
    plant: PatientPlant
    pump: Pump
    cgm: Cgm
    firmware: Firmware
    coprocessor: CoprocessorNode
    imc: SerialChannel
    timing: SystemTiming


def build_bench(
    script: ScenarioScript,
    seed: int = 0,
    patient: PatientParams | None = None,
    therapy: TherapyParams | None = None,
    rules: list[SafetyRule] | None = None,
    timing: SystemTiming | None = None,
) -> Bench:
    script.validate()
    ov = script.overrides
    try:
        patient = with_overrides(patient or PatientParams(), ov.get("patient", {}))
        therapy = TherapyParams.from_dict((therapy or TherapyParams()).to_dict() | ov.get("therapy", {}))
        timing = replace(timing or SystemTiming(), **ov.get("timing", {}))
    except (TypeError, ValueError) as exc:
        raise ScriptError(f"{script.name}: bad override: {exc}") from exc
    base_rules = rules if rules is not None else default_rules(timing.heartbeat_period_ms)
    rules = apply_rule_overrides(base_rules, ov.get("rules", {}))

    sizes = MessageSizes()
    sim = Simulator()
    imc = SerialChannel(sim, "imc", "coprocessor", timing.baud, timing.bits_per_byte)
    back = SerialChannel(sim, "imc-back", "firmware", timing.baud, timing.bits_per_byte)
    # the plant starts at equilibrium; basal only flows once the firmware commands it
    plant = PatientPlant(sim, patient, equilibrium(patient))
    pump = Pump(sim, plant, therapy.pump_unit, minutes(timing.basal_period_min))
    fw_timing = FirmwareTiming(timing.heartbeat_period_ms, minutes(timing.cgm_period_min), timing.param_buffer_len, sizes)
    firmware = Firmware(sim, imc, therapy, fw_timing)
    core = Coprocessor(rules, pump_unit=therapy.pump_unit)
    node = CoprocessorNode(sim, core, back, timing.processing_ms, timing.quantum_ms, sizes, timing.emergency_basal_rate)
    cgm = Cgm(sim, plant, minutes(timing.cgm_period_min), seed)

    for a in script.actions:
        at = minutes(a.at_min)
        if a.action == "rf_packet":
            sim.schedule(Event(at, "harness", "firmware", "rf", a.packet))
        elif a.action == "meal":
            sim.schedule(Event(at, "harness", "plant", "meal", a.grams))
        elif a.action == "disable_firmware":
            sim.schedule(Event(at, "harness", "firmware", "disable"))
        elif a.action == "enable_firmware":
            sim.schedule(Event(at, "harness", "firmware", "enable"))

    cgm.start()
    firmware.start()
    node.start()
    return Bench(sim, plant, pump, cgm, firmware, node, imc, timing)


# reports ------------------------------------------------------------------


@dataclass
class ScenarioReport:
    name: str
    seed: int
    duration_ms: SimTime
    verdicts: list[Verdict]
    bg_trace: list[tuple[float, float, float]]  # (time_min, true bg, insulin U in interval)
    samples: list[tuple[SimTime, float, float]]
    alarms: list[tuple[SimTime, str, str]]
    commands: list[dict]
    delivered: dict[int, float]
    counters: dict
    min_compartment: float
    event_count: int
    firmware_alarms: list[tuple[SimTime, str]]
    meals: list[tuple[SimTime, float]]
    trace: list = field(repr=False, default_factory=list)
    event_digest: str = ""

    def verdict_lines(self) -> str:
        return "".join(v.line() + "\n" for v in self.verdicts)

    def bg_csv(self) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(["time_min", "bg_mg_dl", "insulin_u"])
        for t, bg, ins in self.bg_trace:
            writer.writerow([f"{t:.1f}", f"{bg:.2f}", f"{ins:.3f}"])
        return buf.getvalue()

    def summary(self) -> dict:
        return {
            "name": self.name,
            "seed": self.seed,
            "duration_min": self.duration_ms / MS_PER_MIN,
            "counters": self.counters,
            "alarms": [{"at_ms": t, "rule_id": r, "detail": d} for t, r, d in self.alarms],
            "commands": self.commands,
            "insulin_delivered_u": round(sum(self.delivered.values()), 6),
            "min_bg_mg_dl": round(min(bg for _, bg, _ in self.bg_trace), 3),
            "max_bg_mg_dl": round(max(bg for _, bg, _ in self.bg_trace), 3),
            "event_count": self.event_count,
            "event_digest": self.event_digest,
        }

    def to_json(self) -> str:
        return json.dumps(self.summary(), indent=2, sort_keys=True) + "\n"

    def write(self, out_dir: str | Path) -> list[Path]:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        paths = [out / "verdicts.log", out / "bg_trace.csv", out / "report.json"]
        paths[0].write_text(self.verdict_lines())
        paths[1].write_text(self.bg_csv())
        paths[2].write_text(self.to_json())
        return paths


def golden_lines(report: ScenarioReport, quantum_ms: int = 60_000) -> str:
    """Verdict sequence with timestamps quantized to the scheduler quantum."""
    return "".join(f"{v.at // quantum_ms}\t{v.rule_id}\t{v.decision.value}\n" for v in report.verdicts)


def _count(verdicts: list[Verdict]) -> dict:
    tally = {"allowed": 0, "blocked": 0, "warned": 0, "resets": 0}
    key = {Decision.ALLOW: "allowed", Decision.BLOCK: "blocked", Decision.WARN: "warned", Decision.RESET_MAIN: "resets"}
    for v in verdicts:
        tally[key[v.decision]] += 1
    return tally


def run_scenario(
    script: ScenarioScript,
    seed: int = 0,
    patient: PatientParams | None = None,
    therapy: TherapyParams | None = None,
    rules: list[SafetyRule] | None = None,
    timing: SystemTiming | None = None,
) -> ScenarioReport:
    bench = build_bench(script, seed, patient, therapy, rules, timing)
    end = minutes(script.duration_min)
    bench.sim.run_until(end)
    bench.plant.advance_to(end)
    return make_report(script, seed, bench)


def make_report(script: ScenarioScript, seed: int, bench: Bench) -> ScenarioReport:
    core = bench.coprocessor.core
    verdicts = list(core.log)
    by_cmd = {v.cmd_id: v for v in verdicts if v.cmd_id is not None}
    received = {cmd.cmd_id: t for t, cmd, _ in bench.pump.received}
    commands = []
    for cmd in bench.firmware.commands:
        v = by_cmd.get(cmd.cmd_id)
        commands.append({
            "cmd_id": cmd.cmd_id,
            "mode": cmd.mode.value,
            "amount": cmd.amount,
            "sent_at_ms": cmd.sent_at,
            "verdict": v.decision.value if v else None,
            "rule_id": v.rule_id if v else None,
            "verdict_at_ms": v.at if v else None,
            "actuated_at_ms": received.get(cmd.cmd_id),
            "delivered_u": round(bench.plant.delivered.get(cmd.cmd_id, 0.0), 6),
        })

    counters = _count(verdicts)
    for mode in Mode:
        ids = {c["cmd_id"] for c in commands if c["mode"] == mode.value}
        counters[mode.value.lower()] = _count([v for v in verdicts if v.cmd_id in ids])

    trace = []
    prev_total = 0.0
    for (t, bg, _), total in zip(bench.cgm.samples, bench.cgm.insulin_totals):
        trace.append((t / MS_PER_MIN, bg, total - prev_total))
        prev_total = total

    digest = _digest(bench.sim.log)
    return ScenarioReport(
        name=script.name,
        seed=seed,
        duration_ms=minutes(script.duration_min),
        verdicts=verdicts,
        bg_trace=trace,
        samples=list(bench.cgm.samples),
        alarms=list(bench.coprocessor.alarms),
        commands=commands,
        delivered=dict(bench.plant.delivered),
        counters=counters,
        min_compartment=bench.plant.min_compartment,
        event_count=len(bench.sim.log),
        firmware_alarms=list(bench.firmware.alarms),
        meals=list(bench.plant.meals),
        trace=list(bench.coprocessor.trace),
        event_digest=digest,
    )


def _digest(log: list[Event]) -> str:
    h = hashlib.sha256()
    for e in log:
        h.update(f"{e.at}|{e.source}|{e.target}|{e.kind}|{e.payload!r}\n".encode())
    return h.hexdigest()


# independent cross-check ---------------------------------------------------


def reference_classify(trace: list, rules: list[SafetyRule], pump_unit: float = 0.1) -> dict[int, str]:
    """ALLOW/BLOCK per pump command, recomputed from the coprocessor's input trace.

    Written separately from ``Coprocessor`` and kept deliberately naive: it
    replays the trace and applies the pump-related rules in a single pass.
    """
    pump_rule = next((r for r in rules if isinstance(r, IoAccessRule) and r.device == "pump"), None)
    max_bolus = next((r.units for r in rules if isinstance(r, MaxBolus)), None)
    max_basal = next((r.units_per_hour for r in rules if isinstance(r, MaxBasalRate)), None)
    interval = next((r.minutes for r in rules if isinstance(r, MinBolusInterval)), None)

    state = ProgramState.IDLE
    previous = None
    pump_hits = 0
    pump_times: list[SimTime] = []
    have_bg = False
    last_bolus: SimTime | None = None
    result: dict[int, str] = {}
    for t, msg in trace:
        if msg == "RESET":
            state, previous, pump_hits = ProgramState.IDLE, None, 0
        elif isinstance(msg, StateTransition):
            previous, state, pump_hits = msg.from_state, msg.to_state, 0
        elif isinstance(msg, SensorSnoop) and msg.device == "cgm":
            if msg.bg_reading is not None and msg.bg_reading >= 0:
                have_bg = True
        elif isinstance(msg, ActuatorCmd):
            pump_hits += 1
            pump_times.append(t)
            basal = state == ProgramState.INFUSE_INSULIN and previous == ProgramState.COMPUTE_BASAL
            units = round(msg.amount * pump_unit, 9)
            ok = have_bg
            if pump_rule is not None:
                ok = ok and state in pump_rule.allowed_states
                if pump_rule.max_accesses_per_entry is not None:
                    ok = ok and pump_hits <= pump_rule.max_accesses_per_entry
                if pump_rule.max_access_frequency is not None:
                    count, window = pump_rule.max_access_frequency
                    ok = ok and sum(1 for x in pump_times if x > t - window) <= count
            if basal:
                ok = ok and (max_basal is None or units <= max_basal)
            else:
                ok = ok and (max_bolus is None or units <= max_bolus)
                ok = ok and (interval is None or last_bolus is None or (t - last_bolus) / 60_000 >= interval)
            result[msg.cmd_id] = "ALLOW" if ok else "BLOCK"
            if ok and not basal:
                last_bolus = t
    return result


# fuzzing ------------------------------------------------------------------


def random_script(rng: np.random.Generator, duration_min: float = 240.0, name: str = "fuzz") -> ScenarioScript:
    """Random mix of bolus requests, parameter updates, exploits, meals and hangs."""
    actions: list[Action] = []
    for _ in range(int(rng.integers(0, 9))):
        at = round(float(rng.uniform(0, duration_min)), 3)
        choice = int(rng.integers(0, 8))
        if choice <= 2:
            dose = None if rng.random() < 0.5 else round(float(rng.uniform(0, 30)), 1)
            packet = RfPacket(PacketKind.BOLUS_REQUEST, carbs=round(float(rng.uniform(0, 120)), 1), dose=dose)
            actions.append(Action(at, "rf_packet", packet=packet))
        elif choice == 3:
            packet = RfPacket(PacketKind.PARAM_UPDATE, payload_len=int(rng.integers(1, 64)),
                              params={"max_bolus": round(float(rng.uniform(1, 25)), 1)})
            actions.append(Action(at, "rf_packet", packet=packet))
        elif choice == 4:
            packet = RfPacket(PacketKind.EXPLOIT, payload_len=64, crafted_target="infuse_insulin_clamp")
            actions.append(Action(at, "rf_packet", packet=packet))
        elif choice == 5:
            actions.append(Action(at, "meal", grams=round(float(rng.uniform(10, 100)), 1)))
        elif choice == 6:
            actions.append(Action(at, "disable_firmware"))
        else:
            actions.append(Action(at, "enable_firmware"))
    actions.sort(key=lambda a: a.at_min)
    return ScenarioScript(name, duration_min, tuple(actions), title="fuzz")
