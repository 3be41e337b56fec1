"""Shock experiment on the bundled 1000-distributor system.

Runs the flexibility sweep through the CLI and prints, for a few days,
the deficit without flexibility, the best flexibility and its gain, plus
the resupply windows at each ASD.

    python3 scripts/stress_demo.py --out out/stress
"""
import argparse
import csv
import os
import sys
from collections import defaultdict

from flexchain import cli


def main(argv=None) -> int:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--out", default="out/stress")
    ap.add_argument("--config", help="INI with a [stress] section")
    ap.add_argument("--workers", type=int, default=cli.default_workers())
    args = ap.parse_args(argv)

    argv = ["stress", "--preset", "stress", "--out", args.out, "--workers", str(args.workers)]
    if args.config:
        argv += ["--config", args.config]
    code = cli.main(argv)
    if code:
        return code

    deficit = defaultdict(dict)
    with open(os.path.join(args.out, "runs.csv"), newline="") as fh:
        for r in csv.DictReader(fh):
            deficit[int(r["t"])][float(r["phi"])] = float(r["deficit"])
    print(f"{'day':>4} {'deficit(0)':>11} {'best phi':>9} {'gain':>10}")
    for t in (20, 30, 40, 50, 60, 90, 120, 180):
        if t not in deficit:
            continue
        row = deficit[t]
        best = min(row, key=lambda p: (row[p], p))
        print(f"{t:>4} {row[0.0]:>11.4f} {best:>9.1f} {row[0.0] - row[best]:>10.5f}")
    windows = defaultdict(dict)
    with open(os.path.join(args.out, "resupply_windows.csv"), newline="") as fh:
        for r in csv.DictReader(fh):
            windows[float(r["asd"])][float(r["phi"])] = int(r["window"])
    for asd, w in sorted(windows.items()):
        print(f"ASD {asd:.2f}: window {w[0.0]} days rigid, {max(w.values())} longest over the grid")
    return 0


if __name__ == "__main__":
    sys.exit(main())
