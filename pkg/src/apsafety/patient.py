"""Glucose-insulin dynamics of a type 1 diabetes patient and a CGM sensor.

Compartments (all per patient, not per kg):

    stomach            Q1  [g]     dQ1/dt = -k_abs Q1                      (+ meal impulses)
    intestine          Q2  [g]     dQ2/dt = k_abs (Q1 - Q2)
    subcutaneous depot S1  [U]     dS1/dt = u - S1/tau                     (+ bolus impulses)
    subcutaneous depot S2  [U]     dS2/dt = (S1 - S2)/tau
    plasma insulin     I   [U/L]   dI/dt  = -k_clr I + S2/(tau V_I)
    plasma glucose     G   [mg/dL] dG/dt  = EGP_net + f k_abs Q2/V_G - S_I I G

``u`` is the continuous basal infusion in U/min.  ``EGP_net`` is endogenous
production minus insulin-independent uptake, per dL of glucose space, and
``S_I`` is solved so that ``G = target_equilibrium_bg`` is a fixed point under
the configured basal rate.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, fields
from pathlib import Path

import numpy as np

from .simcore import SimTime, minutes

# patient-file keys that differ from the attribute names
_FILE_ALIASES = {
    "body_weight_kg": "body_weight",
    "egp_mg_per_kg_min": "egp",
    "equilibrium_bg": "target_equilibrium_bg",
    "basal_u_per_h": "basal_rate",
}


@dataclass(frozen=True)
class PatientParams:
    body_weight: float = 78.0  # kg
    egp: float = 2.40  # mg/kg/min
    insulin_independent_uptake: float = 1.0  # mg/kg/min
    glucose_volume: float = 1.88  # dL/kg
    insulin_volume: float = 0.12  # L/kg
    carb_absorption_rate: float = 0.035  # 1/min
    carb_bioavailability: float = 0.8
    insulin_clearance_rate: float = 0.02  # 1/min
    sc_absorption_time: float = 50.0  # min, per depot compartment
    target_equilibrium_bg: float = 110.0  # mg/dL
    basal_rate: float = 1.0  # U/h that holds the equilibrium
    noise_sd: float = 1.0  # mg/dL, CGM

    def __post_init__(self) -> None:
        for f in fields(self):
            value = getattr(self, f.name)
            if not math.isfinite(value):
                raise ValueError(f"{f.name} must be finite")
            if f.name == "noise_sd":
                if value < 0:
                    raise ValueError("noise_sd must be >= 0")
            elif value <= 0:
                raise ValueError(f"{f.name} must be > 0")
        if self.egp <= self.insulin_independent_uptake:
            raise ValueError("egp must exceed insulin_independent_uptake")

    @property
    def glucose_space(self) -> float:
        """Glucose distribution volume, dL."""
        return self.glucose_volume * self.body_weight

    @property
    def insulin_space(self) -> float:
        """Insulin distribution volume, L."""
        return self.insulin_volume * self.body_weight

    @property
    def egp_net(self) -> float:
        """Net endogenous glucose appearance, mg/dL/min."""
        return (self.egp - self.insulin_independent_uptake) / self.glucose_volume

    @property
    def equilibrium_insulin(self) -> float:
        """Plasma insulin (U/L) under the equilibrium basal rate."""
        return self.basal_rate / 60.0 / (self.insulin_clearance_rate * self.insulin_space)

    @property
    def insulin_sensitivity(self) -> float:
        """Fractional glucose clearance per (U/L) per min."""
        return self.egp_net / (self.equilibrium_insulin * self.target_equilibrium_bg)

    def derived(self) -> dict[str, float]:
        return {
            "egp_net_mg_per_dl_min": self.egp_net,
            "equilibrium_insulin_u_per_l": self.equilibrium_insulin,
            "insulin_sensitivity": self.insulin_sensitivity,
        }

    @classmethod
    def from_dict(cls, data: dict) -> PatientParams:
        known = {f.name for f in fields(cls)}
        kwargs = {}
        for key, value in data.items():
            name = _FILE_ALIASES.get(key, key)
            if name in known:
                kwargs[name] = float(value)
            elif key != "derived":
                raise ValueError(f"unknown patient parameter {key!r}")
        return cls(**kwargs)

    @classmethod
    def from_file(cls, path: str | Path) -> PatientParams:
        return cls.from_dict(json.loads(Path(path).read_text()))

    def to_dict(self) -> dict:
        out = asdict(self)
        for alias, name in _FILE_ALIASES.items():
            out[alias] = out.pop(name)
        out["derived"] = self.derived()
        return out


@dataclass(frozen=True)
class PatientState:
    bg: float  # mg/dL
    gut_carbs: float  # g, stomach
    plasma_insulin: float  # U/L
    sc_insulin: tuple[float, float] = (0.0, 0.0)  # U in the two depots
    time: SimTime = 0
    gut_absorbing: float = 0.0  # g, intestine

    def compartments(self) -> tuple[float, ...]:
        return (self.gut_carbs, self.gut_absorbing, self.sc_insulin[0], self.sc_insulin[1], self.plasma_insulin, self.bg)


@dataclass(frozen=True)
class CgmSample:
    bg_reading: float
    at: SimTime
    noise_sd: float


def equilibrium(params: PatientParams, time: SimTime = 0) -> PatientState:
    """Analytic fixed point under ``params.basal_rate`` with an empty gut."""
    depot = params.basal_rate / 60.0 * params.sc_absorption_time
    return PatientState(
        bg=params.target_equilibrium_bg,
        gut_carbs=0.0,
        plasma_insulin=params.equilibrium_insulin,
        sc_insulin=(depot, depot),
        time=time,
    )


def _derivatives(x: tuple[float, ...], p: PatientParams, infusion: float, si: float) -> tuple[float, ...]:
    q1, q2, s1, s2, i, g = x
    tau = p.sc_absorption_time
    emptied = p.carb_absorption_rate * q1
    absorbed = p.carb_absorption_rate * q2
    return (
        -emptied,
        emptied - absorbed,
        infusion - s1 / tau,
        (s1 - s2) / tau,
        -p.insulin_clearance_rate * i + s2 / (tau * p.insulin_space),
        p.egp_net + p.carb_bioavailability * absorbed * 1000.0 / p.glucose_space - si * i * g,
    )


def _rk4(x: tuple[float, ...], p: PatientParams, dt: float, infusion: float, si: float) -> tuple[float, ...]:
    k1 = _derivatives(x, p, infusion, si)
    k2 = _derivatives(tuple(a + dt / 2 * b for a, b in zip(x, k1)), p, infusion, si)
    k3 = _derivatives(tuple(a + dt / 2 * b for a, b in zip(x, k2)), p, infusion, si)
    k4 = _derivatives(tuple(a + dt * b for a, b in zip(x, k3)), p, infusion, si)
    return tuple(
        a + dt / 6 * (b1 + 2 * b2 + 2 * b3 + b4) for a, b1, b2, b3, b4 in zip(x, k1, k2, k3, k4)
    )


def step(
    state: PatientState,
    params: PatientParams,
    dt: float,
    insulin_in: float = 0.0,
    carbs_in: float = 0.0,
    basal_rate: float | None = None,
    clamp: bool = True,
) -> PatientState:
    """Advance ``state`` by ``dt`` minutes.

    ``insulin_in`` (U) and ``carbs_in`` (g) are impulses applied at the start
    of the step.  ``basal_rate`` (U/h) is a continuous infusion held for the
    whole step and defaults to the patient's equilibrium basal rate.  With
    ``clamp=False`` the raw integrator output is returned, which lets callers
    check non-negativity instead of having it enforced.
    """
    rate = params.basal_rate if basal_rate is None else basal_rate
    for name, value in (("dt", dt), ("insulin_in", insulin_in), ("carbs_in", carbs_in), ("basal_rate", rate)):
        if not math.isfinite(value):
            raise ValueError(f"{name} must be finite")
    if dt <= 0:
        raise ValueError("dt must be > 0")
    if insulin_in < 0 or carbs_in < 0 or rate < 0:
        raise ValueError("inputs must be non-negative")

    x = (
        state.gut_carbs + carbs_in,
        state.gut_absorbing,
        state.sc_insulin[0] + insulin_in,
        state.sc_insulin[1],
        state.plasma_insulin,
        state.bg,
    )
    x = _rk4(x, params, dt, rate / 60.0, params.insulin_sensitivity)
    if clamp:
        x = tuple(max(0.0, v) for v in x)
    return PatientState(
        bg=x[5],
        gut_carbs=x[0],
        plasma_insulin=x[4],
        sc_insulin=(x[2], x[3]),
        time=state.time + minutes(dt),
        gut_absorbing=x[1],
    )


def simulate(
    state: PatientState,
    params: PatientParams,
    duration: float,
    dt: float = 1.0,
    insulin: dict[float, float] | None = None,
    carbs: dict[float, float] | None = None,
    basal_rate: float | None = None,
) -> np.ndarray:
    """Open-loop trajectory sampled every ``dt`` minutes.

    ``insulin`` and ``carbs`` map impulse times (minutes from start, snapped
    to the step grid) to amounts.  Returns an array of shape (n + 1, 2) with
    columns (minutes, bg).
    """
    n = int(round(duration / dt))
    insulin_at = _snap(insulin or {}, dt)
    carbs_at = _snap(carbs or {}, dt)
    out = np.empty((n + 1, 2))
    out[0] = (0.0, state.bg)
    for k in range(n):
        state = step(state, params, dt, insulin_at.get(k, 0.0), carbs_at.get(k, 0.0), basal_rate)
        out[k + 1] = ((k + 1) * dt, state.bg)
    return out


def _snap(impulses: dict[float, float], dt: float) -> dict[int, float]:
    snapped: dict[int, float] = {}
    for t, amount in impulses.items():
        k = int(round(t / dt))
        snapped[k] = snapped.get(k, 0.0) + amount
    return snapped


def cgm_reading(true_bg: float, noise: float) -> float:
    return max(0.0, true_bg + noise)


def sample_cgm(state: PatientState, noise_sd: float, rng_seed) -> CgmSample:
    """One CGM reading; deterministic for a given ``rng_seed``."""
    if noise_sd < 0:
        raise ValueError("noise_sd must be >= 0")
    noise = 0.0
    if noise_sd > 0:
        noise = float(np.random.default_rng(rng_seed).normal(0.0, noise_sd))
    return CgmSample(bg_reading=cgm_reading(state.bg, noise), at=state.time, noise_sd=noise_sd)


def with_overrides(params: PatientParams, overrides: dict) -> PatientParams:
    if not overrides:
        return params
    merged = params.to_dict()
    merged.pop("derived")
    merged.update(overrides)
    return PatientParams.from_dict(merged)
