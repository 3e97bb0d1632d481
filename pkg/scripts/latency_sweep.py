"""Command-to-actuation delay of S1 across UART baud rates."""

import argparse
import math

from apsafety.scenario import SystemTiming, find_scenario, run_scenario

FRAME_BYTES = 240


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--bauds", type=int, nargs="+", default=[2400, 4800, 9600, 19200, 38400, 115200])
    args = ap.parse_args()
    print("baud     expected_ms  observed_ms")
    for baud in args.bauds:
        timing = SystemTiming(baud=baud)
        expected = math.ceil(FRAME_BYTES * timing.bits_per_byte * 1000 / baud) + timing.processing_ms
        report = run_scenario(find_scenario("S1"), 0, timing=timing)
        observed = sorted({c["actuated_at_ms"] - c["sent_at_ms"] for c in report.commands if c["actuated_at_ms"] is not None})
        print(f"{baud:<8} {expected:<12} {observed}")


if __name__ == "__main__":
    main()
