"""Regenerate the golden verdict sequences used by the regression tests."""

import argparse
from pathlib import Path

from apsafety.scenario import builtin_scenarios, golden_lines, run_scenario


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--out", type=Path, default=Path(__file__).resolve().parent.parent / "tests" / "golden")
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args()
    args.out.mkdir(parents=True, exist_ok=True)
    for script in builtin_scenarios():
        report = run_scenario(script, args.seed)
        path = args.out / f"{script.name}.txt"
        path.write_text(golden_lines(report))
        print(f"{path}: {len(report.verdicts)} verdicts")


if __name__ == "__main__":
    main()
