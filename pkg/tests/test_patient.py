import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from apsafety.patient import (
    PatientParams,
    _rk4,
    cgm_reading,
    equilibrium,
    sample_cgm,
    simulate,
    step,
    with_overrides,
)
from oracles import euler_bg

P = PatientParams()


def test_named_parameters():
    assert P.body_weight == 78.0
    assert P.egp == 2.40


def test_derived_constants_close_the_equilibrium():
    # insulin_sensitivity * I_eq * G_eq must balance the net production
    assert P.insulin_sensitivity * P.equilibrium_insulin * P.target_equilibrium_bg == pytest.approx(P.egp_net)
    assert P.equilibrium_insulin == pytest.approx(1.0 / 60 / (0.02 * 0.12 * 78))


def test_equilibrium_is_a_fixed_point():
    s = equilibrium(P)
    nxt = step(s, P, 1.0)
    assert abs(nxt.bg - s.bg) < 1e-6
    traj = simulate(s, P, 24 * 60)
    assert np.max(np.abs(traj[:, 1] - P.target_equilibrium_bg)) < 2.0


def test_unit_bolus_lowers_bg_over_the_next_hour():
    traj = simulate(equilibrium(P), P, 60, insulin={0: 1.0})
    assert np.all(np.diff(traj[1:, 1]) < 0)
    assert traj[-1, 1] < P.target_equilibrium_bg


def test_meal_raises_bg_for_ninety_minutes():
    traj = simulate(equilibrium(P), P, 90, carbs={0: 75.0})
    assert np.all(np.diff(traj[:, 1]) > 0)


def test_rk4_agrees_with_fine_euler_oracle():
    ours = simulate(equilibrium(P), P, 360, insulin={0: 2.0, 120: 1.0}, carbs={30: 40.0})[:, 1]
    ref = np.array(euler_bg(P, 360, bolus={0: 2.0, 120: 1.0}, carbs={30: 40.0}))
    assert np.max(np.abs(ours - ref)) < 0.05


def test_halved_step_converges():
    a = simulate(equilibrium(P), P, 360, 1.0, insulin={0: 3.0}, carbs={60: 50.0})
    b = simulate(equilibrium(P), P, 360, 0.5, insulin={0: 3.0}, carbs={60: 50.0})
    assert np.max(np.abs(a[:, 1] - b[::2, 1])) < 0.5


def test_step_validates_inputs():
    s = equilibrium(P)
    for bad in (dict(dt=0), dict(dt=-1), dict(dt=float("nan"))):
        with pytest.raises(ValueError):
            step(s, P, **bad)
    with pytest.raises(ValueError):
        step(s, P, 1.0, insulin_in=-1)
    with pytest.raises(ValueError):
        step(s, P, 1.0, carbs_in=float("inf"))


def test_params_reject_bad_values():
    with pytest.raises(ValueError):
        PatientParams(body_weight=0)
    with pytest.raises(ValueError):
        PatientParams(egp=float("nan"))
    with pytest.raises(ValueError):
        PatientParams(egp=0.5)


def test_param_file_round_trip(tmp_path):
    path = tmp_path / "patient.json"
    path.write_text(json.dumps(P.to_dict()))
    assert PatientParams.from_file(path) == P
    path.write_text(json.dumps({"body_weight_kg": 70, "equilibrium_bg": 95}))
    p = PatientParams.from_file(path)
    assert p.body_weight == 70 and p.target_equilibrium_bg == 95 and p.egp == 2.40
    with pytest.raises(ValueError):
        PatientParams.from_dict({"weight": 3})


def test_overrides_move_the_equilibrium():
    p = with_overrides(P, {"target_equilibrium_bg": 95.0})
    traj = simulate(equilibrium(p), p, 600)
    assert np.max(np.abs(traj[:, 1] - 95.0)) < 1e-6


def test_cgm_noise_free_and_clamped():
    s = equilibrium(P)
    assert sample_cgm(s, 0.0, 1).bg_reading == s.bg
    assert cgm_reading(2.0, -5.0) == 0.0


def test_cgm_is_deterministic_per_seed():
    s = equilibrium(P)
    assert sample_cgm(s, 2.0, (3, 4)) == sample_cgm(s, 2.0, (3, 4))


def test_cgm_noise_is_zero_mean():
    s = equilibrium(P)
    readings = [sample_cgm(s, 2.0, k).bg_reading for k in range(10_000)]
    assert abs(np.mean(readings) - s.bg) < 0.1


@settings(max_examples=100)
@given(
    st.lists(st.tuples(st.integers(0, 359), st.floats(0, 10)), max_size=5),
    st.lists(st.tuples(st.integers(0, 359), st.floats(0, 150)), max_size=5),
    st.floats(0, 5),
)
def test_compartments_stay_non_negative_without_clamping(boluses, meals, basal):
    # the raw integrator output is checked, before the defensive clamp in step()
    s = equilibrium(P)
    x = (0.0, 0.0, *s.sc_insulin, s.plasma_insulin, s.bg)
    bol, carb = dict(boluses), dict(meals)
    for k in range(360):
        x = (x[0] + carb.get(k, 0.0), x[1] + bol.get(k, 0.0), *x[2:])
        x = _rk4(x, P, 1.0, basal / 60.0, P.insulin_sensitivity)
        assert min(x) >= 0.0
