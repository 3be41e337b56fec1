"""Time FIFO path reconstruction on a large synthetic log.

Prints one JSON object with the transaction count, generation and
reconstruction wall time, and the process peak resident memory. The peak
covers the whole process, generation included, so it overstates what the
reconstruction alone needs.

    python3 scripts/scale_check.py --transactions 10000000
"""
import argparse
import json
import math
import resource
import sys
import time
from dataclasses import replace

from flexchain.cli import PRESETS
from flexchain.ingest import generate_synthetic_system
from flexchain.pathrec import reconstruct_paths

PER_YEAR = 2_000_000   # rough yield of the stress preset per simulated year


def peak_rss_mb() -> float:
    kb = resource.getrusage(resource.RUSAGE_SELF).ru_maxrss
    return kb / 1024 if sys.platform != "darwin" else kb / 2**20


def main(argv=None) -> dict:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--transactions", type=int, default=10_000_000)
    ap.add_argument("--seed", type=int, default=1)
    ap.add_argument("--workers", type=int, default=1)
    args = ap.parse_args(argv)

    spec = replace(PRESETS["stress"], seed=args.seed,
                   years=max(1, math.ceil(args.transactions / PER_YEAR)))
    t0 = time.perf_counter()
    catalog, log = generate_synthetic_system(spec)
    while len(log) < args.transactions:
        spec = replace(spec, years=spec.years + 1)
        catalog, log = generate_synthetic_system(spec)
    log = log.take(slice(0, args.transactions))
    generated = time.perf_counter() - t0

    t0 = time.perf_counter()
    paths = reconstruct_paths(log, catalog, workers=args.workers)
    elapsed = time.perf_counter() - t0
    report = dict(transactions=len(log), generate_s=round(generated, 2),
                  reconstruct_s=round(elapsed, 2), distinct_paths=len(paths.paths),
                  delivered=int(sum(paths.paths.values())), peak_rss_mb=round(peak_rss_mb(), 1))
    print(json.dumps(report))
    return report


if __name__ == "__main__":
    main()
