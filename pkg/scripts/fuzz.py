"""Random-script fuzzing of the interception path.

Checks per run that every delivered unit has an ALLOW verdict, that no patient
compartment goes negative, that a rerun is identical, and that the verdicts
match the reference classifier.
"""

import argparse
import time

import numpy as np

from apsafety.coprocessor import Decision
from apsafety.rules import default_rules
from apsafety.scenario import random_script, reference_classify, run_scenario


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--runs", type=int, default=1000)
    ap.add_argument("--duration", type=float, default=180.0)
    ap.add_argument("--start", type=int, default=0)
    args = ap.parse_args()
    rules = default_rules()
    issues = 0
    t0 = time.perf_counter()
    for k in range(args.start, args.start + args.runs):
        script = random_script(np.random.default_rng(k), duration_min=args.duration, name=f"fuzz-{k}")
        a = run_scenario(script, seed=k)
        b = run_scenario(script, seed=k)
        allowed = {v.cmd_id for v in a.verdicts if v.decision is Decision.ALLOW}
        problems = []
        if any(u > 0 and cid not in allowed for cid, u in a.delivered.items()):
            problems.append("uncovered delivery")
        if a.min_compartment < 0:
            problems.append(f"negative compartment {a.min_compartment}")
        if a.event_digest != b.event_digest or a.to_json() != b.to_json():
            problems.append("nondeterministic")
        ref = reference_classify(a.trace, rules)
        if any(ref.get(c["cmd_id"]) != c["verdict"] for c in a.commands if c["verdict"]):
            problems.append("classifier mismatch")
        if problems:
            issues += 1
            print(f"run {k}: {', '.join(problems)}")
    print(f"{args.runs} runs, {issues} with issues, {time.perf_counter() - t0:.1f}s")
    return 1 if issues else 0


if __name__ == "__main__":
    raise SystemExit(main())
