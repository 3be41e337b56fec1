"""Regenerate tests/data/demo_paths.csv with the unit-level tracer.

Every package of the bundled demo log is followed as its own token, so the
golden counts do not depend on the quantity-splitting queues they check.
"""
import os
import sys

HERE = os.path.dirname(os.path.abspath(__file__))
sys.path.insert(0, os.path.join(HERE, "..", "tests"))

from oracles import unit_level_trace  # noqa: E402

from flexchain.cli import PRESETS  # noqa: E402
from flexchain.ingest import generate_synthetic_system  # noqa: E402
from flexchain.pathrec import write_paths  # noqa: E402


def main():
    catalog, log = generate_synthetic_system(PRESETS["demo"])
    paths, censored, underflow = unit_level_trace(log, catalog.roles)
    if censored or underflow:
        raise SystemExit("demo log should be stock-consistent")
    dest = os.path.join(HERE, "..", "tests", "data", "demo_paths.csv")
    write_paths(paths, dest)
    print(f"{len(paths)} paths, {sum(paths.values())} packages -> {dest}")


if __name__ == "__main__":
    main()
