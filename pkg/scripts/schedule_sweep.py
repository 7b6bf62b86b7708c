#!/usr/bin/env python3
"""Emit schedule CSVs for several shift configurations (one file per
configuration) so log-SNR curves can be plotted side by side."""

import argparse
import os
import sys

from layerdiff.schedule import ShiftConfig, schedule_table, table_to_csv

SWEEPS = {
    "unshifted": (1.0,),
    "two_level": (1.0, 0.125),
    "three_level": (1.0, 0.125, 0.03125),
}


def main() -> int:
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--steps", type=int, default=256)
    ap.add_argument("--out", default="runs/schedules")
    args = ap.parse_args()
    os.makedirs(args.out, exist_ok=True)
    for name, shifts in SWEEPS.items():
        table = schedule_table(args.steps, ShiftConfig(shifts=shifts))
        path = os.path.join(args.out, f"{name}.csv")
        with open(path, "w", newline="") as fp:
            table_to_csv(table, fp)
        print(f"wrote {path} ({len(shifts)} level(s), {args.steps} steps)")
    return 0


if __name__ == "__main__":
    sys.exit(main())
