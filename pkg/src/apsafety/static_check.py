"""Development-stage rule check over the firmware's BG decision function.

The alarm and dosing decisions depend on a single input, the BG reading, so
each rule is checked by evaluating it at every point of a quantized BG range
(by default -100..1100 mg/dL in 0.1 steps, the sensor resolution).  A rule with
no violating point is VALID; otherwise it is UNKNOWN and the lowest violating
reading is kept as the counterexample.  Rules that need run-time context
(dose history, program state, time) cannot be decided here; they are reported
UNKNOWN(undecidable) and left to the coprocessor.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from enum import Enum
from functools import partial
from typing import Callable

import numpy as np

from .firmware import BgDecision, TherapyParams, bg_decision
from .rules import SafetyRule, default_rules

Predicate = Callable[[np.ndarray, BgDecision], np.ndarray]
DecisionFn = Callable[[np.ndarray], BgDecision]


class ConfigError(ValueError):
    """Unusable static-check configuration."""


class Status(str, Enum):
    VALID = "VALID"
    UNKNOWN = "UNKNOWN"
    TIMEOUT = "TIMEOUT"


@dataclass(frozen=True)
class Domain:
    lo: float = -100.0
    hi: float = 1100.0
    step: float = 0.1

    def size(self) -> int:
        if not (np.isfinite(self.lo) and np.isfinite(self.hi) and np.isfinite(self.step)):
            raise ConfigError("domain bounds must be finite")
        if self.step <= 0 or self.hi < self.lo:
            raise ConfigError(f"empty domain [{self.lo}, {self.hi}] step {self.step}")
        return int(np.floor((self.hi - self.lo) / self.step + 1e-9)) + 1

    def points(self, start: int = 0, stop: int | None = None) -> np.ndarray:
        stop = self.size() if stop is None else stop
        return np.round(self.lo + np.arange(start, stop) * self.step, 9)


@dataclass(frozen=True)
class StaticRule:
    """``predicate`` returns True where the rule holds; None marks a run-time rule."""

    id: str
    description: str
    predicate: Predicate | None = None
    reason: str = ""

    @property
    def runtime(self) -> bool:
        return self.predicate is None


@dataclass(frozen=True)
class RuleResult:
    rule_id: str
    status: Status
    counterexample: float | None = None
    reason: str = ""
    evaluated: int = 0

    @property
    def undecidable(self) -> bool:
        return self.status is Status.UNKNOWN and self.counterexample is None


@dataclass
class StaticReport:
    firmware: str
    domain: Domain
    results: list[RuleResult] = field(default_factory=list)

    def __getitem__(self, rule_id: str) -> RuleResult:
        for r in self.results:
            if r.rule_id == rule_id:
                return r
        raise KeyError(rule_id)

    def undecidable(self) -> set[str]:
        return {r.rule_id for r in self.results if r.undecidable}

    def table(self) -> str:
        width = max([len("rule")] + [len(r.rule_id) for r in self.results])
        lines = [
            f"static check: firmware={self.firmware} domain=[{self.domain.lo:g}, {self.domain.hi:g}] step={self.domain.step:g}",
            f"{'rule':<{width}}  Valid  Unknown  Timeout  note",
        ]
        for r in self.results:
            marks = {s: ("x" if r.status is s else "") for s in Status}
            if r.counterexample is not None:
                note = f"counterexample bg={r.counterexample:g}"
            else:
                note = r.reason
            lines.append(
                f"{r.rule_id:<{width}}  {marks[Status.VALID]:^5}  {marks[Status.UNKNOWN]:^7}  {marks[Status.TIMEOUT]:^7}  {note}".rstrip()
            )
        return "\n".join(lines) + "\n"


def check_static(
    rules: list[StaticRule],
    decision_fn: DecisionFn,
    domain: Domain = Domain(),
    budget: int | None = None,
    chunk: int = 200_000,
    firmware: str = "reference",
) -> StaticReport:
    """Evaluate every decidable rule at every domain point.

    ``budget`` caps the number of points evaluated per rule; a rule that has
    neither failed nor covered the domain within it is TIMEOUT.
    """
    n = domain.size()
    report = StaticReport(firmware, domain)
    for rule in rules:
        if rule.runtime:
            report.results.append(RuleResult(rule.id, Status.UNKNOWN, reason=f"undecidable: {rule.reason}"))
            continue
        limit = n if budget is None else min(n, budget)
        result = None
        for start in range(0, limit, chunk):
            stop = min(limit, start + chunk)
            bg = domain.points(start, stop)
            holds = np.asarray(rule.predicate(bg, decision_fn(bg)), dtype=bool)
            bad = np.flatnonzero(~holds)
            if bad.size:
                result = RuleResult(rule.id, Status.UNKNOWN, float(bg[bad[0]]), evaluated=start + int(bad[0]) + 1)
                break
        if result is None:
            status = Status.VALID if limit == n else Status.TIMEOUT
            reason = "" if status is Status.VALID else f"budget of {budget} points exhausted"
            result = RuleResult(rule.id, status, reason=reason, evaluated=limit)
        report.results.append(result)
    return report


def random_oracle(
    rules: list[StaticRule],
    decision_fn: DecisionFn,
    domain: Domain = Domain(),
    n_samples: int = 1_000_000,
    seed: int = 0,
) -> dict[str, float | None]:
    """Independent check by uniform random sampling of real BG values.

    Returns, per decidable rule, the smallest violating sample or None.
    """
    domain.size()
    rng = np.random.default_rng(seed)
    bg = rng.uniform(domain.lo, domain.hi, n_samples)
    decision = decision_fn(bg)
    found: dict[str, float | None] = {}
    for rule in rules:
        if rule.runtime:
            continue
        holds = np.asarray(rule.predicate(bg, decision), dtype=bool)
        found[rule.id] = float(bg[~holds].min()) if (~holds).any() else None
    return found


# rules --------------------------------------------------------------------


def firmware_rules(
    bg_low: float = 60.0,
    bg_high: float = 300.0,
    dose_max: float | None = None,
    runtime: list[SafetyRule] | None = None,
) -> list[StaticRule]:
    """Static rules of the firmware's decision code plus the run-time rule set.

    Thresholds default to the coprocessor's 60/300 mg/dL configuration.
    """
    dose_max = TherapyParams().max_bolus if dose_max is None else dose_max
    rules = [
        StaticRule(
            "sensor-error",
            "raise the error message if the measured BG level is below zero",
            lambda bg, d: (bg >= 0) | d.error_raised,
        ),
        StaticRule(
            "warn-high",
            f"warn if BG is above {bg_high:g} mg/dL",
            lambda bg, d: ~((bg >= 0) & (bg > bg_high)) | d.warn_high,
        ),
        StaticRule(
            "warn-low",
            f"warn if BG is below {bg_low:g} mg/dL",
            lambda bg, d: ~((bg >= 0) & (bg < bg_low)) | d.warn_low,
        ),
        StaticRule(
            "dose-bounded",
            f"computed dose stays within [0, {dose_max:g}] U",
            lambda bg, d: (d.computed_dose >= 0) & (d.computed_dose <= dose_max),
        ),
    ]
    for rule in default_rules() if runtime is None else runtime:
        rules.append(StaticRule(rule.id, f"{rule.category} rule", None, reason=f"needs run-time {_context(rule)}"))
    return rules


def _context(rule: SafetyRule) -> str:
    return {
        "io_access": "program state",
        "state_transition": "program state history",
        "physiological": "dose and sample history",
        "time_triggered": "clock and history",
    }[rule.category]


# firmware variants ---------------------------------------------------------


def reference_firmware(params: TherapyParams = TherapyParams()) -> DecisionFn:
    return partial(bg_decision, params=params)


def mutant_firmwares(params: TherapyParams = TherapyParams()) -> dict[str, DecisionFn]:
    """Three single-threshold mutants of the decision code."""
    return {
        "mutant-error": partial(bg_decision, params=params, error_below=-1.0),
        "mutant-high": partial(bg_decision, params=params, high_above=params.bg_high + 10),
        "mutant-low": partial(bg_decision, params=params, low_below=params.bg_low - 10),
    }


def firmwares(params: TherapyParams = TherapyParams()) -> dict[str, DecisionFn]:
    return {"reference": reference_firmware(params)} | mutant_firmwares(params)
