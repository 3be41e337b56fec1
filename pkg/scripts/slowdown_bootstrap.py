"""Bootstrap bands of the diffusion slowdown factor on a synthetic system.

Synthesizes a preset, reconstructs its paths and runs ``flexchain slowdown``
with the requested number of resamples.

    python3 scripts/slowdown_bootstrap.py --preset stress --samples 1000
"""
import argparse
import os
import sys

from flexchain import cli


def main(argv=None) -> int:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--preset", default="demo", choices=sorted(cli.PRESETS))
    ap.add_argument("--samples", type=int, default=1000)
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--out", default="out/slowdown")
    ap.add_argument("--workers", type=int, default=cli.default_workers())
    args = ap.parse_args(argv)

    synth, paths = os.path.join(args.out, "synth"), os.path.join(args.out, "paths")
    steps = [
        ["synth", "--preset", args.preset, "--out", synth],
        ["reconstruct", "--transactions", os.path.join(synth, "transactions.csv"),
         "--catalog", os.path.join(synth, "catalog.csv"), "--out", paths],
    ]
    os.makedirs(args.out, exist_ok=True)
    ini = os.path.join(args.out, "slowdown.ini")
    with open(ini, "w") as fh:
        fh.write(f"[slowdown]\nphis = [0.0, 0.25, 0.5, 0.75, 1.0]\nsamples = {args.samples}\n")
    steps.append(["slowdown", "--config", ini, "--paths", paths, "--seed", str(args.seed),
                  "--out", args.out])
    for step in steps:
        code = cli.main(step + ["--workers", str(args.workers)])
        if code:
            return code
    with open(os.path.join(args.out, "slowdown.csv")) as fh:
        print(fh.read(), end="")
    return 0


if __name__ == "__main__":
    sys.exit(main())
