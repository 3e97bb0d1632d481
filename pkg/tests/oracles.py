"""Independent reference computations used by the tests.

Written from the model equations directly, without importing the code under
test beyond parameter containers.
"""

import math


def euler_bg(params, minutes, dt=0.01, bolus=None, carbs=None, basal_rate=None):
    """Forward-Euler integration of the patient model from equilibrium.

    ``bolus`` and ``carbs`` map minute -> amount (impulses).  Returns bg
    at every whole minute.
    """
    bolus = bolus or {}
    carbs = carbs or {}
    rate = (params.basal_rate if basal_rate is None else basal_rate) / 60.0
    vg = params.glucose_volume * params.body_weight
    vi = params.insulin_volume * params.body_weight
    tau = params.sc_absorption_time
    kclr = params.insulin_clearance_rate
    egp = (params.egp - params.insulin_independent_uptake) / params.glucose_volume
    i_eq = params.basal_rate / 60.0 / (kclr * vi)
    si = egp / (i_eq * params.target_equilibrium_bg)

    q1, q2, s1, s2, i, g = 0.0, 0.0, params.basal_rate / 60.0 * tau, params.basal_rate / 60.0 * tau, i_eq, params.target_equilibrium_bg
    per_min = int(round(1 / dt))
    out = [g]
    for m in range(minutes):
        q1 += carbs.get(m, 0.0)
        s1 += bolus.get(m, 0.0)
        for _ in range(per_min):
            emptied = params.carb_absorption_rate * q1
            ra = params.carb_absorption_rate * q2
            dq1, dq2 = -emptied, emptied - ra
            ds1 = rate - s1 / tau
            ds2 = (s1 - s2) / tau
            di = -kclr * i + s2 / (tau * vi)
            dg = egp + params.carb_bioavailability * ra * 1000.0 / vg - si * i * g
            q1, q2, s1, s2, i, g = q1 + dt * dq1, q2 + dt * dq2, s1 + dt * ds1, s2 + dt * ds2, i + dt * di, g + dt * dg
        out.append(g)
    return out


def uart_ms(n_bytes, baud, bits_per_byte=10):
    """Frame time in ms, rounded up."""
    return math.ceil(n_bytes * bits_per_byte * 1000 / baud)
