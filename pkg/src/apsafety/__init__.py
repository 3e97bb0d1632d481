"""Closed-loop artificial pancreas simulator with a rule-enforcing safety coprocessor."""

from .coprocessor import Coprocessor, Decision, Verdict
from .patient import PatientParams, PatientState
from .rules import default_rules
from .scenario import ScenarioReport, ScenarioScript, builtin_scenarios, run_scenario
from .simcore import Simulator

__all__ = [
    "Coprocessor",
    "Decision",
    "PatientParams",
    "PatientState",
    "ScenarioReport",
    "ScenarioScript",
    "Simulator",
    "Verdict",
    "builtin_scenarios",
    "default_rules",
    "run_scenario",
]
