"""Command-line entry point: ``flexchain <command> [--config f.ini] [--seed n] [--out dir] [--workers n]``.

Every command reads its settings from the INI section named after it
(``[synth]``, ``[stress]``, ...), writes plain CSV/JSON into ``--out`` and
finishes with a ``manifest.json`` listing inputs, outputs, the digest of
the effective settings, the seed and the wall-clock time.

Exit codes: 0 success, 1 invalid input, 2 numerical failure, 3 I/O error.
"""
from __future__ import annotations

import argparse
import ast
import configparser
import csv
import hashlib
import json
import logging
import os
import sys
import time
from dataclasses import asdict, dataclass, field, fields

from . import __version__
from .estimate import (EstimationError, ShipmentModel, fit_phi_homogeneous, observed_shipments,
                       position_profile, write_fits, year_to_year_flexibility)
from .ingest import (EntityCatalog, IngestError, SynthSpec, TransactionLog, generate_synthetic_system,
                     parse_catalog, parse_day, parse_transactions, validate_transactions, write_catalog,
                     write_rules, write_transactions)
from .pathrec import (ReconstructionError, load_multiset, path_counts, reconstruct_paths,
                      reconstruct_paths_by_year, save_multiset)
from .simulate import (SimConfig, SimSystem, ShockSpec, SimulationError, sweep_phi, write_runs)
from .spectral import SpectralError, bootstrap_slowdown, write_slowdown
from .tensors import TensorError, alternative_edges, build_one_step, build_two_step, mix, write_graph, write_tensor

logger = logging.getLogger("flexchain")

EXIT_OK, EXIT_INVALID, EXIT_NUMERICAL, EXIT_IO = 0, 1, 2, 3

# Bundled synthetic systems. ``demo`` is small enough for tests; ``stress``
# is the 1000-distributor system used for the shock experiments.
PRESETS = {
    "demo": SynthSpec(n_manufacturers=3, n_distributors=12, n_final_buyers=40, seed=7,
                      years=2, order_prob=0.1, buffer_days=(1.0, 12.0), buffer_skew=0.8),
    "stress": SynthSpec(n_distributors=1000, n_final_buyers=10000, seed=1,
                        buffer_days=(1.0, 12.0), buffer_skew=0.8, overlap=0.5),
}


class CommandError(Exception):
    def __init__(self, message: str, code: int):
        super().__init__(message)
        self.code = code


# -- settings -----------------------------------------------------------------------

@dataclass
class IngestSettings:
    start: str | None = None
    end: str | None = None


@dataclass
class ReconstructSettings:
    by_year: bool = False


@dataclass
class TensorSettings:
    phi: float | None = None
    products: list[str] | None = None


@dataclass
class FitSettings:
    max_sweeps: int = 200
    grid: int = 11
    bin_width: float = 0.5


@dataclass
class StressSettings:
    tau: float = 5.0
    horizon: int = 180
    lead_time: int = 1
    shock_fraction: float = 0.3
    t_star: int = 1
    production_halt: bool = True
    grid: list[float] = field(default_factory=lambda: [round(0.1 * i, 1) for i in range(11)])
    times: list[int] = field(default_factory=lambda: [40])
    asd: list[float] = field(default_factory=lambda: [0.02, 0.05, 0.10])
    buffer_rule: str = "net"
    products: list[str] | None = None


@dataclass
class SlowdownSettings:
    phis: list[float] = field(default_factory=lambda: [0.0, 0.25, 0.5, 0.75, 1.0])
    samples: int = 200


@dataclass
class GraphSettings:
    products: list[str] | None = None


def _coerce(text: str):
    try:
        return ast.literal_eval(text)
    except (ValueError, SyntaxError):
        low = text.strip().lower()
        if low in ("true", "yes", "on"):
            return True
        if low in ("false", "no", "off"):
            return False
        if low in ("none", ""):
            return None
        return text.strip()


def load_settings(cls, path: str | None, section: str):
    """Defaults of ``cls`` overridden by the ``[section]`` of an INI file."""
    values = {}
    if path:
        parser = configparser.ConfigParser()
        try:
            with open(path, encoding="utf-8") as fh:
                parser.read_file(fh)
        except OSError as exc:
            raise CommandError(f"cannot read config {path}: {exc}", EXIT_IO) from exc
        except configparser.Error as exc:
            raise CommandError(f"malformed config {path}: {exc}", EXIT_INVALID) from exc
        if parser.has_section(section):
            values = {k: _coerce(v) for k, v in parser.items(section)}
    known = {f.name for f in fields(cls)}
    unknown = sorted(set(values) - known)
    if unknown:
        raise CommandError(f"[{section}]: unknown setting(s) {', '.join(unknown)}", EXIT_INVALID)
    if isinstance(values.get("buffer_days"), (list, tuple)):
        values["buffer_days"] = tuple(float(x) for x in values["buffer_days"])
    try:
        return cls(**values)
    except (TypeError, ValueError) as exc:
        raise CommandError(f"[{section}]: {exc}", EXIT_INVALID) from exc


def settings_digest(settings) -> str:
    blob = json.dumps(asdict(settings), sort_keys=True, default=str)
    return hashlib.sha256(blob.encode("utf-8")).hexdigest()


# -- manifest -----------------------------------------------------------------------

@dataclass
class RunManifest:
    command: str
    inputs: list[str]
    config_digest: str
    seed: int | None
    version: str
    outputs: list[str]
    duration_s: float
    exit_code: int = 0
    error: str | None = None

    def write(self, directory: str) -> str:
        path = os.path.join(directory, "manifest.json")
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(asdict(self), fh, indent=2, sort_keys=True)
            fh.write("\n")
        return path


@dataclass
class Context:
    args: argparse.Namespace
    inputs: list[str] = field(default_factory=list)
    outputs: list[str] = field(default_factory=list)
    digest: str = ""
    seed: int | None = None

    def out(self, name: str) -> str:
        path = os.path.join(self.args.out, name)
        self.outputs.append(path)
        return path

    def settings(self, cls, section: str):
        s = load_settings(cls, self.args.config, section)
        self.digest = settings_digest(s)
        return s


# -- loading helpers ------------------------------------------------------------------

def _need(ctx: Context, name: str) -> str:
    value = getattr(ctx.args, name, None)
    if not value:
        raise CommandError(f"--{name.replace('_', '-')} is required", EXIT_INVALID)
    ctx.inputs.append(value)
    return value


def _load_catalog(ctx: Context) -> EntityCatalog:
    return parse_catalog(_need(ctx, "catalog"))


def _load_log(ctx: Context, catalog: EntityCatalog) -> TransactionLog:
    return parse_transactions(_need(ctx, "transactions"), catalog)


def _load_paths(ctx: Context):
    directory = _need(ctx, "paths")
    if not os.path.exists(os.path.join(directory, "paths.csv")):
        raise CommandError(f"{directory}: no paths.csv (run `reconstruct` first)", EXIT_IO)
    return load_multiset(directory)


def _preset(name: str, seed: int | None) -> SynthSpec:
    try:
        spec = PRESETS[name]
    except KeyError:
        raise CommandError(f"unknown preset {name!r} (choose from {', '.join(PRESETS)})",
                           EXIT_INVALID) from None
    if seed is not None:
        spec = SynthSpec(**{**asdict(spec), "seed": seed})
    return spec


def _write_csv(path: str, header: list[str], rows) -> None:
    with open(path, "w", encoding="utf-8", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        w.writerows(rows)


# -- commands -----------------------------------------------------------------------

def cmd_synth(ctx: Context) -> int:
    if ctx.args.preset:
        spec = _preset(ctx.args.preset, ctx.args.seed)
        ctx.digest = settings_digest(spec)
    else:
        spec = ctx.settings(SynthSpec, "synth")
        if ctx.args.seed is not None:
            spec = SynthSpec(**{**asdict(spec), "seed": ctx.args.seed})
            ctx.digest = settings_digest(spec)
    ctx.seed = spec.seed
    catalog, log = generate_synthetic_system(spec)
    write_transactions(log, ctx.out("transactions.csv"))
    write_catalog(catalog, ctx.out("catalog.csv"))
    write_rules(spec.rules(), ctx.out("rules.csv"))
    logger.info("synthesized %d transactions among %d entities", len(log), len(catalog))
    return EXIT_OK


def cmd_ingest(ctx: Context) -> int:
    s = ctx.settings(IngestSettings, "ingest")
    window = None
    if s.start or s.end:
        try:
            window = (parse_day(s.start) if s.start else -10**9, parse_day(s.end) if s.end else 10**9)
        except ValueError as exc:
            raise CommandError(f"[ingest]: {exc}", EXIT_INVALID) from exc
    catalog = _load_catalog(ctx)
    log, errors = validate_transactions(_need(ctx, "transactions"), catalog, window)
    report = dict(valid_rows=len(log), n_errors=len(errors),
                  errors=[dict(line=e.line, message=e.message) for e in errors])
    with open(ctx.out("validation_report.json"), "w", encoding="utf-8") as fh:
        json.dump(report, fh, indent=2)
        fh.write("\n")
    if errors:
        for e in errors[:10]:
            print(f"invalid row: {e}", file=sys.stderr)
        return EXIT_INVALID
    write_transactions(log, ctx.out("transactions.csv"))
    write_catalog(catalog, ctx.out("catalog.csv"))
    return EXIT_OK


def cmd_reconstruct(ctx: Context) -> int:
    s = ctx.settings(ReconstructSettings, "reconstruct")
    catalog = _load_catalog(ctx)
    log = _load_log(ctx, catalog)
    pm = reconstruct_paths(log, catalog, workers=ctx.args.workers)
    ctx.outputs += save_multiset(pm, ctx.args.out)
    summary = dict(transactions=len(log), distinct_paths=len(pm.paths),
                   delivered=int(sum(pm.paths.values())),
                   censored=int(sum(pm.censored.values())),
                   phantom_units=int(sum(pm.underflow.values())))
    if s.by_year:
        yearly = reconstruct_paths_by_year(log, catalog)
        for year, ypm in sorted(yearly.items()):
            ctx.outputs += save_multiset(ypm, ctx.args.out, stem=f"paths_{year}")
        summary["years"] = sorted(yearly)
    with open(ctx.out("summary.json"), "w", encoding="utf-8") as fh:
        json.dump(summary, fh, indent=2)
        fh.write("\n")
    return EXIT_OK


def cmd_tensors(ctx: Context) -> int:
    s = ctx.settings(TensorSettings, "tensors")
    counts = path_counts(_load_paths(ctx), products=s.products)
    two = build_two_step(counts)
    one = build_one_step(counts, two)
    write_tensor(counts.entries, ctx.out("counts.csv"))
    write_tensor(two.entries, ctx.out("two_step.csv"))
    write_tensor(one.entries, ctx.out("one_step.csv"))
    if s.phi is not None:
        write_tensor(mix(two, one, s.phi).entries, ctx.out("mixed.csv"))
    return EXIT_OK


def cmd_fit(ctx: Context) -> int:
    s = ctx.settings(FitSettings, "fit")
    catalog = _load_catalog(ctx)
    log = _load_log(ctx, catalog)
    yearly = reconstruct_paths_by_year(log, catalog)
    if len(yearly) < 2:
        raise CommandError("fitting needs at least two calendar years of shipments", EXIT_INVALID)
    rows, skipped = year_to_year_flexibility(yearly, catalog, max_sweeps=s.max_sweeps, grid=s.grid)
    write_fits(rows, ctx.out("fits.csv"))
    profile = position_profile(rows, s.bin_width)
    keys = ["position_low", "position_high", "n", "median", "low50", "high50", "low95", "high95"]
    _write_csv(ctx.out("position_profile.csv"), keys, ([p[k] for k in keys] for p in profile))
    _write_csv(ctx.out("skipped.csv"), ["year", "entity_id"],
               ((y, e) for y in sorted(skipped) for e in skipped[y]))
    years = sorted(yearly)
    shared = []
    for prev, cur in zip(years, years[1:]):
        model = ShipmentModel.from_counts(path_counts(yearly[prev]))
        est = fit_phi_homogeneous(model, observed_shipments(path_counts(yearly[cur])))
        shared.append((cur, repr(est.phi), repr(est.loglik), int(bool(est.flat))))
    _write_csv(ctx.out("shared_fit.csv"), ["year", "phi_hat", "loglik", "flat_flag"], shared)
    return EXIT_OK


def cmd_stress(ctx: Context) -> int:
    s = ctx.settings(StressSettings, "stress")
    if ctx.args.preset:
        spec = _preset(ctx.args.preset, ctx.args.seed)
        ctx.seed = spec.seed
        catalog, log = generate_synthetic_system(spec)
        ctx.digest = hashlib.sha256((ctx.digest + settings_digest(spec)).encode()).hexdigest()
    else:
        catalog = _load_catalog(ctx)
        log = _load_log(ctx, catalog)
    seed = ctx.seed if ctx.seed is not None else (ctx.args.seed or 0)
    ctx.seed = seed
    try:
        config = SimConfig(tau=s.tau, horizon=s.horizon, seed=seed, lead_time=s.lead_time)
        shock = ShockSpec(s.shock_fraction, s.t_star, s.production_halt)
    except ValueError as exc:
        raise CommandError(f"[stress]: {exc}", EXIT_INVALID) from exc
    system = SimSystem.from_data(log, catalog, products=s.products, buffer_rule=s.buffer_rule)
    sweep = sweep_phi(system, shock, s.grid, config=config, workers=ctx.args.workers)
    write_runs(sweep.rows, ctx.out("runs.csv"))
    _write_csv(ctx.out("resupply_windows.csv"), ["asd", "phi", "window"],
               ((repr(a), repr(p), w) for a in s.asd for p, w in sweep.windows(a).items()))
    frontier = []
    for t in s.times:
        if not 1 <= t <= s.horizon:
            raise CommandError(f"[stress]: time {t} outside the horizon", EXIT_INVALID)
        best = sweep.best_phi(t)
        for r in sweep.at(t):
            frontier.append((t, repr(r.phi), repr(r.delta_reduction), repr(r.gamma),
                             int(r.efficient), int(r.phi == best)))
    _write_csv(ctx.out("frontier.csv"),
               ["t", "phi", "delta_reduction", "gamma", "efficient", "best"], frontier)
    return EXIT_OK


def cmd_slowdown(ctx: Context) -> int:
    s = ctx.settings(SlowdownSettings, "slowdown")
    ctx.seed = ctx.args.seed if ctx.args.seed is not None else 0
    rows = bootstrap_slowdown(_load_paths(ctx), s.phis, n_samples=s.samples, seed=ctx.seed,
                              workers=ctx.args.workers)
    write_slowdown(rows, ctx.out("slowdown.csv"))
    return EXIT_OK


def cmd_export_graph(ctx: Context) -> int:
    s = ctx.settings(GraphSettings, "export-graph")
    counts = path_counts(_load_paths(ctx), products=s.products)
    two = build_two_step(counts)
    write_graph(alternative_edges(two, build_one_step(counts, two)), ctx.out("graph.csv"))
    return EXIT_OK


COMMANDS = {
    "ingest": (cmd_ingest, "validate a transaction log and write a normalized copy"),
    "synth": (cmd_synth, "generate a synthetic distribution system"),
    "reconstruct": (cmd_reconstruct, "rebuild distribution paths under FIFO stock keeping"),
    "tensors": (cmd_tensors, "build preference tensors from reconstructed paths"),
    "fit": (cmd_fit, "estimate flexibility year over year"),
    "stress": (cmd_stress, "run the supply-shock simulation over a flexibility grid"),
    "slowdown": (cmd_slowdown, "bootstrap the diffusion slowdown factor"),
    "export-graph": (cmd_export_graph, "write observed and alternative second-order edges"),
}


def default_workers() -> int:
    try:
        return max(1, len(os.sched_getaffinity(0)))
    except AttributeError:
        return os.cpu_count() or 1


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="INI file; settings are read from the command's section")
    common.add_argument("--seed", type=int, default=None)
    common.add_argument("--out", default="out", help="output directory (created if missing)")
    common.add_argument("--workers", type=int, default=default_workers())
    common.add_argument("--transactions", help="transaction CSV")
    common.add_argument("--catalog", help="entity catalog CSV")
    common.add_argument("--paths", help="directory holding paths.csv from `reconstruct`")
    common.add_argument("--preset", help=f"bundled synthetic system ({', '.join(PRESETS)})")
    common.add_argument("-v", "--verbose", action="store_true")
    parser = argparse.ArgumentParser(prog="flexchain", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)
    for name, (_, help_text) in COMMANDS.items():
        sub.add_parser(name, parents=[common], help=help_text)
    return parser


def _classify(exc: BaseException) -> int:
    if isinstance(exc, CommandError):
        return exc.code
    if isinstance(exc, (SpectralError, SimulationError, EstimationError, ArithmeticError)):
        return EXIT_NUMERICAL
    if isinstance(exc, (IngestError, ReconstructionError, TensorError, KeyError, ValueError)):
        return EXIT_INVALID
    if isinstance(exc, OSError):
        return EXIT_IO
    raise exc


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    if args.workers < 1:
        print("error: --workers must be >= 1", file=sys.stderr)
        return EXIT_INVALID
    try:
        os.makedirs(args.out, exist_ok=True)
    except OSError as exc:
        print(f"error: cannot create {args.out}: {exc}", file=sys.stderr)
        return EXIT_IO
    ctx = Context(args, seed=args.seed)
    if args.config:
        ctx.inputs.append(args.config)
    started = time.perf_counter()
    error = None
    try:
        code = COMMANDS[args.command][0](ctx)
    except Exception as exc:  # mapped to an exit code below; unexpected types re-raise
        code = _classify(exc)
        error = str(exc)
        print(f"error: {error}", file=sys.stderr)
    manifest = RunManifest(args.command, ctx.inputs, ctx.digest, ctx.seed, __version__,
                           [p for p in ctx.outputs if os.path.exists(p)],
                           round(time.perf_counter() - started, 6), code, error)
    try:
        manifest.write(args.out)
    except OSError as exc:
        print(f"error: cannot write manifest: {exc}", file=sys.stderr)
        return EXIT_IO
    return code


if __name__ == "__main__":
    sys.exit(main())
