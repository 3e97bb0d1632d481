"""Run every builtin scenario and write verdict logs, BG traces and reports."""

import argparse
from pathlib import Path

from apsafety.scenario import builtin_scenarios, run_scenario


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--out", type=Path, default=Path("out"))
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args()
    for script in builtin_scenarios():
        report = run_scenario(script, args.seed)
        report.write(args.out / script.name)
        c = report.counters
        lat = [x["actuated_at_ms"] - x["sent_at_ms"] for x in report.commands if x["actuated_at_ms"] is not None]
        print(
            f"{script.name:<3} {script.title:<22} allowed={c['allowed']:<3} blocked={c['blocked']:<3} "
            f"warned={c['warned']:<3} resets={c['resets']} latency_ms={sorted(set(lat))} "
            f"bg=[{report.summary()['min_bg_mg_dl']:.1f}, {report.summary()['max_bg_mg_dl']:.1f}]"
        )


if __name__ == "__main__":
    main()
