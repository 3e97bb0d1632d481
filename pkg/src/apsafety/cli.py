"""Command-line entry point.

    apsafety run --scenario S4 --seed 7 --out out/
    apsafety run --all --out out/
    apsafety static-check --rules default
    apsafety list-scenarios
    apsafety dump-config --out config/

Exit status: 0 on success, 1 when ``--strict`` is set and any BLOCK or WARN
was issued, 2 on configuration errors.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from .coprocessor import Decision
from .firmware import TherapyParams
from .patient import PatientParams
from .rules import default_rules, dump_rules, load_rules
from .scenario import ScenarioScript, ScriptError, SystemTiming, builtin_scenarios, run_scenario
from .static_check import ConfigError, Domain, check_static, firmware_rules, firmwares

log = logging.getLogger("apsafety")

EXIT_OK, EXIT_FLAGGED, EXIT_CONFIG = 0, 1, 2


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message: str):
        self.print_usage(sys.stderr)
        raise UsageError(message)


def _existing_file(value: str) -> Path:
    path = Path(value)
    if not path.is_file():
        raise argparse.ArgumentTypeError(f"no such file: {value}")
    return path


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="apsafety", description="Artificial pancreas safety-coprocessor simulator")
    parser.add_argument("-v", "--verbose", action="count", default=0)
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    run = sub.add_parser("run", help="run one or more scenarios")
    which = run.add_mutually_exclusive_group(required=True)
    which.add_argument("--scenario", help="builtin scenario name or title")
    which.add_argument("--script", type=_existing_file, help="scenario script file (JSON)")
    which.add_argument("--all", action="store_true", help="run every builtin scenario")
    run.add_argument("--seed", type=int, default=0)
    run.add_argument("--out", type=Path, help="output directory")
    run.add_argument("--strict", action="store_true", help="exit 1 if any BLOCK or WARN occurred")
    run.add_argument("--patient", type=_existing_file, help="patient parameter file")
    run.add_argument("--therapy", type=_existing_file, help="therapy parameter file")
    run.add_argument("--rules", type=_existing_file, help="safety rule file")

    static = sub.add_parser("static-check", help="check firmware decision rules over the BG domain")
    static.add_argument("--rules", default="default", help="'default' or a run-time rule file")
    static.add_argument("--firmware", default="reference", help="reference, mutant-error, mutant-high, mutant-low or all")
    static.add_argument("--therapy", type=_existing_file, help="therapy parameter file")
    static.add_argument("--lo", type=float, default=Domain.lo)
    static.add_argument("--hi", type=float, default=Domain.hi)
    static.add_argument("--step", type=float, default=Domain.step)
    static.add_argument("--budget", type=int, default=None, help="per-rule evaluation budget in points")

    sub.add_parser("list-scenarios", help="list builtin scenarios")

    dump = sub.add_parser("dump-config", help="write default configuration files")
    dump.add_argument("--out", type=Path, help="directory; prints to stdout when omitted")
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        print(f"apsafety: error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    logging.basicConfig(level=logging.WARNING - 10 * min(args.verbose, 2), format="%(levelname)s %(message)s")
    handlers = {
        "run": cmd_run,
        "static-check": cmd_static,
        "list-scenarios": cmd_list,
        "dump-config": cmd_dump,
    }
    try:
        return handlers[args.command](args)
    except (ConfigError, ScriptError, ValueError, KeyError, json.JSONDecodeError) as exc:
        print(f"apsafety: configuration error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


def cmd_run(args) -> int:
    builtins = builtin_scenarios()
    if args.all:
        scripts = builtins
    elif args.script is not None:
        scripts = [ScenarioScript.from_file(args.script)]
    else:
        matches = [s for s in builtins if args.scenario in (s.name, s.title)]
        if not matches:
            names = ", ".join(f"{s.name} ({s.title})" for s in builtins)
            print(f"apsafety: unknown scenario {args.scenario!r}; available: {names}", file=sys.stderr)
            return EXIT_CONFIG
        scripts = matches
    patient = PatientParams.from_file(args.patient) if args.patient else None
    therapy = TherapyParams.from_file(args.therapy) if args.therapy else None
    rules = load_rules(args.rules) if args.rules else None

    flagged = False
    for script in scripts:
        log.info("running %s (seed %d)", script.name, args.seed)
        report = run_scenario(script, args.seed, patient, therapy, rules, SystemTiming())
        c = report.counters
        print(
            f"{script.name:<4} {script.title:<22} allowed={c['allowed']} blocked={c['blocked']} "
            f"warned={c['warned']} resets={c['resets']}"
        )
        if args.out is not None:
            out = args.out / script.name if len(scripts) > 1 else args.out
            for path in report.write(out):
                log.info("wrote %s", path)
        flagged |= any(v.decision in (Decision.BLOCK, Decision.WARN) for v in report.verdicts)
    return EXIT_FLAGGED if args.strict and flagged else EXIT_OK


def cmd_static(args) -> int:
    therapy = TherapyParams.from_file(args.therapy) if args.therapy else TherapyParams()
    runtime = default_rules() if args.rules == "default" else load_rules(_existing_file(args.rules))
    rules = firmware_rules(therapy.bg_low, therapy.bg_high, therapy.max_bolus, runtime)
    variants = firmwares(therapy)
    if args.firmware == "all":
        names = list(variants)
    elif args.firmware in variants:
        names = [args.firmware]
    else:
        raise ConfigError(f"unknown firmware {args.firmware!r}; available: {', '.join(variants)}, all")
    domain = Domain(args.lo, args.hi, args.step)
    for i, name in enumerate(names):
        if i:
            print()
        print(check_static(rules, variants[name], domain, args.budget, firmware=name).table(), end="")
    return EXIT_OK


def cmd_list(args) -> int:
    for s in builtin_scenarios():
        print(f"{s.name:<4} {s.title:<22} {s.duration_min:g} min  {s.description}")
    return EXIT_OK


def cmd_dump(args) -> int:
    files = {
        "patient.json": json.dumps(PatientParams().to_dict(), indent=2, sort_keys=True) + "\n",
        "therapy.json": json.dumps(TherapyParams().to_dict(), indent=2, sort_keys=True) + "\n",
        "rules.json": dump_rules(default_rules()) + "\n",
    }
    if args.out is None:
        for name, text in files.items():
            print(f"# {name}")
            print(text, end="")
        return EXIT_OK
    args.out.mkdir(parents=True, exist_ok=True)
    for name, text in files.items():
        (args.out / name).write_text(text)
        print(args.out / name)
    return EXIT_OK
