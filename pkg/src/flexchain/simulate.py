"""Inventory-and-ordering dynamics with upstream preferences, and stress tests.

Each distributor keeps one sub-stock per supplier it receives goods from,
``(holder | source)``. Every day, in this order:

1. goods shipped the day before arrive (one-day lead time) and manufacturers
   add their daily production;
2. every distributor orders, per sub-stock, the demand it faced the day
   before plus a fraction ``1 / tau`` of the gap between its target and the
   stock it held at the end of the previous day, never less than zero;
3. an order placed by ``i`` for goods it keeps apart as "from ``j``" goes to
   ``j`` and is split over ``j``'s own sub-stocks ``(j | k)`` following the
   orderer's upstream preferences, the tensor row ``T(phi)[i, j, :]``
   renormalized over ``k``;
4. every sub-stock faces its share of final-buyer demand plus the orders
   split onto it, ships as much as it holds and rations proportionally on
   shortfall.

Manufacturers hold a single production stock keyed ``(m | *)``.
"""
from __future__ import annotations

import csv
import logging
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace
from typing import Iterable, Mapping, Sequence

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .ingest import DISTRIBUTOR, FINAL_BUYER, MANUFACTURER, EntityCatalog, TransactionLog
from .pathrec import VIRTUAL_SOURCE, PathMultiset, path_counts, reconstruct_paths
from .tensors import TransitionTensor, build_one_step, build_two_step, mix

logger = logging.getLogger(__name__)

PRODUCTION = VIRTUAL_SOURCE
BUFFER_RULES = ("net", "gross")


class SimulationError(RuntimeError):
    pass


# -- configuration ----------------------------------------------------------------

@dataclass(frozen=True)
class SimConfig:
    tau: float = 5.0
    horizon: int = 180
    phi: float | Mapping[str, float] = 0.0
    seed: int = 0
    lead_time: int = 1
    audit: bool = True
    audit_tol: float = 1e-9

    def __post_init__(self):
        if self.tau < 1:
            raise ValueError("tau must be >= 1")
        if self.horizon < 1:
            raise ValueError("horizon must be >= 1")
        if self.lead_time != 1:
            raise ValueError("only a one-day lead time is modeled")


@dataclass(frozen=True)
class ShockSpec:
    shock_fraction: float = 0.3
    t_star: int = 1
    production_halt: bool = True

    def __post_init__(self):
        if not 0.0 <= self.shock_fraction <= 1.0:
            raise ValueError("shock_fraction must lie in [0, 1]")
        if self.t_star < 1:
            raise ValueError("t_star must be >= 1 (days are numbered from 1)")


# -- initialization helpers ------------------------------------------------------------

def target_stock(ship_in: float, ship_out: float, to_final: float, rule: str = "net") -> tuple[float, bool]:
    """Target buffer from a year of flows; returns ``(target, floored)``.

    ``ship_out`` is the total ship-out including final-buyer deliveries.
    ``"net"`` keeps what stayed in stock over the year, ``ship_in - ship_out``.
    ``"gross"`` is ``ship_in - (ship_out - to_final)``, which counts a full
    year of final-buyer deliveries as buffer. Non-positive buffers become 1.
    """
    if rule == "net":
        raw = ship_in - ship_out
    elif rule == "gross":
        raw = ship_in - (ship_out - to_final)
    else:
        raise ValueError(f"unknown buffer rule {rule!r}; expected one of {BUFFER_RULES}")
    return (float(raw), False) if raw > 0 else (1.0, True)


def peak_inventory(daily_out: np.ndarray) -> float:
    """Largest stock a producer working at a constant rate needs to hold to
    meet the given daily shipments without running dry (at least 1)."""
    out = np.asarray(daily_out, dtype=float)
    if out.size == 0:
        return 1.0
    rate = out.sum() / out.size
    excess = np.cumsum(out) - rate * np.arange(1, out.size + 1)
    need = max(0.0, float(excess.max())) + max(0.0, -float(excess.min()))
    return max(need, 1.0)


# -- system -------------------------------------------------------------------------

@dataclass
class SimSystem:
    """Sub-stock layout, demand, targets and preferences of one product class.

    Arrays are indexed by sub-stock; ``holder[q]`` and ``source[q]`` name the
    entity keeping sub-stock ``q`` and where its goods came from.
    """
    entities: list[str]
    roles: dict[str, str]
    holder: list[str]
    source: list[str]
    final_demand: np.ndarray     # c_(i|j), per day
    target: np.ndarray           # s^T_(i|j); production capacity for manufacturers
    two_step: TransitionTensor
    one_step: TransitionTensor
    floored: list[str] = field(default_factory=list)
    unsupplied: list[str] = field(default_factory=list)
    days: int = 365

    def __post_init__(self):
        self.index = {(h, s): q for q, (h, s) in enumerate(zip(self.holder, self.source))}
        self.is_producer = np.array([self.roles[h] == MANUFACTURER for h in self.holder])
        self.by_holder: dict[str, list[int]] = {}
        for q, h in enumerate(self.holder):
            self.by_holder.setdefault(h, []).append(q)
        self._split_cache: dict = {}

    def __len__(self) -> int:
        return len(self.holder)

    @classmethod
    def from_data(cls, log: TransactionLog, catalog: EntityCatalog, paths: PathMultiset | None = None,
                  *, products: Iterable[str] | None = None, buffer_rule: str = "net",
                  days: int | None = None) -> "SimSystem":
        """Initialize from one observation window of shipments.

        Products in ``products`` (default: all) are pooled into one
        substitutable good. Daily final demand is the observed final-buyer
        volume over ``days`` (default: the window length), split over
        sub-stocks by ship-in shares; targets follow ``buffer_rule``;
        manufacturers get their peak inventory as capacity.
        """
        if products is not None:
            keep = list(products)
            log = log.select_products(keep)
        else:
            keep = list(log.products)
        if len(log) == 0:
            raise SimulationError("no shipments for the selected products")
        if paths is None:
            paths = reconstruct_paths(log, catalog)
        counts = path_counts(paths, products=keep)
        t2 = build_two_step(counts)
        t1 = build_one_step(counts, t2)

        first, last = int(log.day.min()), int(log.day.max())
        n_days = days if days is not None else last - first + 1
        ents = log.entities
        roles_of = {e: catalog.role(e) for e in ents}
        code_role = np.array([roles_of[e] for e in ents])
        seller, buyer, qty = log.seller, log.buyer, log.quantity.astype(float)
        n = len(ents)
        to_final = np.bincount(seller[code_role[buyer] == FINAL_BUYER],
                               weights=qty[code_role[buyer] == FINAL_BUYER], minlength=n)
        ship_out = np.bincount(seller, weights=qty, minlength=n)
        ship_in = np.bincount(buyer, weights=qty, minlength=n)
        into_dist = code_role[buyer] == DISTRIBUTOR
        pairs: dict[tuple[int, int], float] = {}
        b_idx, s_idx = buyer[into_dist], seller[into_dist]
        key = b_idx.astype(np.int64) * n + s_idx
        uk, inv = np.unique(key, return_inverse=True)
        vol = np.bincount(inv, weights=qty[into_dist])
        for k, v in zip(uk.tolist(), vol.tolist()):
            pairs[(k // n, k % n)] = v

        holder: list[str] = []
        source: list[str] = []
        demand: list[float] = []
        target: list[float] = []
        floored: list[str] = []
        unsupplied: list[str] = []
        # manufacturers: one production stock each
        for m in range(n):
            if code_role[m] != MANUFACTURER or ship_out[m] == 0:
                continue
            daily = np.bincount(log.day[seller == m] - first, weights=qty[seller == m],
                                minlength=last - first + 1)
            holder.append(ents[m])
            source.append(PRODUCTION)
            demand.append(to_final[m] / n_days)
            target.append(peak_inventory(daily))
        by_buyer: dict[int, list[tuple[int, float]]] = {}
        for (b, s), v in sorted(pairs.items()):
            by_buyer.setdefault(b, []).append((s, v))
        for i in range(n):
            if code_role[i] != DISTRIBUTOR:
                continue
            if i not in by_buyer:
                if ship_out[i] > 0:
                    unsupplied.append(ents[i])
                continue
            s_t, was_floored = target_stock(ship_in[i], ship_out[i], to_final[i], buffer_rule)
            if was_floored:
                floored.append(ents[i])
            total_in = sum(v for _, v in by_buyer[i])
            for s, v in by_buyer[i]:
                share = v / total_in
                holder.append(ents[i])
                source.append(ents[s])
                demand.append(to_final[i] / n_days * share)
                target.append(s_t * share)
        if unsupplied:
            logger.warning("%d distributors ship without any ship-in and are left out", len(unsupplied))
        used = sorted(set(holder) | {s for s in source if s != PRODUCTION})
        return cls(used, {e: roles_of[e] for e in used}, holder, source, np.array(demand),
                   np.array(target), t2, t1, floored, unsupplied, n_days)

    # -- preferences --------------------------------------------------------------

    def tensor(self, phi) -> TransitionTensor:
        return mix(self.two_step, self.one_step, phi)

    def split_matrix(self, phi) -> sp.csr_matrix:
        """Row ``r`` (a distributor sub-stock ``(i | j)``) gives the shares of
        an order placed for it that land on each sub-stock ``(j | k)``.

        Rows sum to one. Where the tensor has no usable row for ``(i, j)``,
        the order is spread over ``j``'s sub-stocks by their final demand
        weights, or evenly if those are all zero.
        """
        key = _phi_cache_key(phi)
        if key in self._split_cache:
            return self._split_cache[key]
        cond = self.tensor(phi).conditional()
        rows, cols, vals = [], [], []
        self.fallback_rows = 0
        for r, (i, j) in enumerate(zip(self.holder, self.source)):
            if self.roles[i] == MANUFACTURER:
                continue
            targets = self.by_holder.get(j)
            if not targets:
                raise SimulationError(f"{i} receives from {j}, which holds no stock")
            row = cond.get((i, j), {})
            picked = [(self.index[(j, k)], p) for k, p in row.items() if (j, k) in self.index and p > 0]
            if not picked:
                self.fallback_rows += 1
                w = self.target[targets]
                w = w / w.sum() if w.sum() > 0 else np.full(len(targets), 1.0 / len(targets))
                picked = list(zip(targets, w.tolist()))
            tot = sum(p for _, p in picked)
            for q, p in picked:
                rows.append(r)
                cols.append(q)
                vals.append(p / tot)
        n = len(self)
        S = sp.csr_matrix((vals, (rows, cols)), shape=(n, n))
        S.sum_duplicates()
        self._split_cache[key] = S
        return S

    def steady_demand(self, split: sp.csr_matrix) -> np.ndarray:
        """Daily demand every sub-stock faces when every order equals the
        demand of the day before: solves ``d = c + split^T d``."""
        A = split.T.tocsc()
        d = spla.spsolve((sp.identity(len(self), format="csc") - A).tocsc(), self.final_demand)
        d = np.atleast_1d(np.asarray(d, dtype=float))
        if not np.all(np.isfinite(d)) or d.min() < -1e-9 * max(1.0, d.max()):
            raise SimulationError("no steady state: some orders circulate without reaching a producer")
        return np.maximum(d, 0.0)


def _phi_cache_key(phi):
    if isinstance(phi, Mapping):
        return tuple(sorted((k, float(v)) for k, v in phi.items()))
    return float(phi)


# -- state and dynamics ------------------------------------------------------------------

@dataclass
class SimState:
    day: int
    stock: np.ndarray          # end-of-day stock per sub-stock
    in_flight: np.ndarray      # shipped yesterday, arriving today
    last_demand: np.ndarray    # claims faced yesterday (final share + orders)
    production: np.ndarray     # daily production per sub-stock (producers only)
    halted: bool = False
    delivered: float = 0.0     # cumulative deliveries to final buyers
    produced: float = 0.0      # cumulative production since the start


@dataclass
class DayFlows:
    orders: np.ndarray         # o_(i|j), per sub-stock
    placed: np.ndarray         # orders landing on each sub-stock
    to_final: np.ndarray       # omega_(i|j)
    to_distributors: np.ndarray  # W^out_(i|j)
    received: np.ndarray       # W^in_(i|j), arriving the next day


class Simulation:
    def __init__(self, system: SimSystem, config: SimConfig = SimConfig()):
        self.system = system
        self.config = config
        self.split = system.split_matrix(config.phi)
        self.split_t = self.split.T.tocsr()
        self.orders_mask = ~system.is_producer

    def initial_state(self) -> SimState:
        """Stocks at target, yesterday's flows at the steady state of the
        pre-shock system (so nothing changes until a shock arrives)."""
        sysm = self.system
        steady = sysm.steady_demand(self.split)
        in_flight = np.where(self.orders_mask, steady, 0.0)
        production = np.where(sysm.is_producer, steady, 0.0)
        return SimState(0, sysm.target.astype(float).copy(), in_flight, steady.copy(), production)

    def apply_shock(self, state: SimState, shock: ShockSpec) -> SimState:
        stock = state.stock.copy()
        stock[self.system.is_producer] *= 1.0 - shock.shock_fraction
        return replace(state, stock=stock, halted=state.halted or shock.production_halt)

    def step(self, state: SimState) -> tuple[SimState, DayFlows]:
        cfg = self.config
        made = np.zeros_like(state.production) if state.halted else state.production
        available = state.stock + state.in_flight + made
        gap = (self.system.target - state.stock) / cfg.tau
        orders = np.where(self.orders_mask, np.maximum(0.0, state.last_demand + gap), 0.0)
        placed = self.split_t @ orders
        claims = self.system.final_demand + placed
        with np.errstate(divide="ignore", invalid="ignore"):
            fill = np.where(claims > available, available / claims, 1.0)
        fill = np.where(claims > 0, fill, 1.0)
        to_final = fill * self.system.final_demand
        to_dist = fill * placed
        shipped = to_final + to_dist
        received = orders * (self.split @ fill)
        stock = np.maximum(available - shipped, 0.0)
        new = SimState(state.day + 1, stock, received, claims, state.production, state.halted,
                       state.delivered + float(to_final.sum()), state.produced + float(made.sum()))
        flows = DayFlows(orders, placed, to_final, to_dist, received)
        if cfg.audit:
            self._audit(state, new, available - shipped, orders)
        return new, flows

    def _audit(self, before: SimState, after: SimState, raw_stock: np.ndarray, orders: np.ndarray) -> None:
        tol = self.config.audit_tol
        if raw_stock.min() < -tol * max(1.0, float(np.abs(raw_stock).max())):
            raise SimulationError(f"negative stock on day {after.day}: {raw_stock.min()}")
        mass0 = before.stock.sum() + before.in_flight.sum() + before.delivered + (after.produced - before.produced)
        mass1 = after.stock.sum() + after.in_flight.sum() + after.delivered
        if abs(mass1 - mass0) > tol * max(1.0, abs(mass0)):
            raise SimulationError(f"mass not conserved on day {after.day}: {mass0} -> {mass1}")
        split_total = np.asarray(self.split.sum(axis=1)).ravel() * orders
        if np.abs(split_total - orders).max(initial=0.0) > 1e-12 * max(1.0, float(orders.max(initial=0.0))):
            raise SimulationError(f"split orders do not add up on day {after.day}")

    def run(self, shock: ShockSpec | None = None) -> "RunResult":
        cfg = self.config
        state = self.initial_state()
        horizon = cfg.horizon
        final = np.zeros(horizon)
        out_cum = np.zeros((horizon, len(self.system)))
        shipped = np.zeros(horizon)
        running = np.zeros(len(self.system))
        min_stock = math.inf
        for t in range(1, horizon + 1):
            if shock is not None and t == shock.t_star:
                state = self.apply_shock(state, shock)
            state, flows = self.step(state)
            final[t - 1] = flows.to_final.sum()
            running += flows.to_distributors
            out_cum[t - 1] = running
            shipped[t - 1] = flows.to_final.sum() + flows.to_distributors.sum()
            min_stock = min(min_stock, float(state.stock.min(initial=0.0)))
        demand = float(self.system.final_demand.sum())
        return RunResult(cfg.phi, final, demand, out_cum, shipped, min_stock)


@dataclass
class RunResult:
    phi: float | Mapping[str, float]
    delivered: np.ndarray       # final-buyer deliveries per day, days 1..horizon
    daily_demand: float
    shipped_out: np.ndarray     # cumulative distributor-bound ship-out per sub-stock, per day
    shipped_total: np.ndarray   # all shipments per day
    min_stock: float

    @property
    def deficit(self) -> np.ndarray:
        return deficit(self.delivered, self.daily_demand)


def simulate(system: SimSystem, config: SimConfig = SimConfig(), shock: ShockSpec | None = None) -> RunResult:
    return Simulation(system, config).run(shock)


# -- metrics ------------------------------------------------------------------------------

def deficit(delivered: Sequence[float], daily_demand: float) -> np.ndarray:
    """Share of cumulative final demand left unmet up to each day, in [0, 1]."""
    if daily_demand <= 0:
        raise ValueError("total demand must be positive")
    d = np.asarray(delivered, dtype=float)
    t = np.arange(1, len(d) + 1)
    missing = np.cumsum(daily_demand - d)
    return np.clip(missing / (t * daily_demand), 0.0, 1.0)


def path_usage(flows: np.ndarray, rigid: np.ndarray, flexible: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """How far shipments at some flexibility moved away from the rigid run,
    relative to the fully flexible run; returns ``(gamma, degenerate)``.

    Inputs are cumulative shipments per sub-stock with days along axis 0.
    Days where the fully flexible run matches the rigid one give 0 and a
    ``True`` degenerate flag.
    """
    num = np.abs(np.asarray(flows) - rigid).sum(axis=-1)
    den = np.abs(np.asarray(flexible) - rigid).sum(axis=-1)
    degenerate = den <= 1e-12 * np.maximum(1.0, np.abs(rigid).sum(axis=-1))
    with np.errstate(divide="ignore", invalid="ignore"):
        gamma = np.where(degenerate, 0.0, num / np.where(degenerate, 1.0, den))
    return gamma, degenerate


def resupply_window(curve: Sequence[float], asd: float) -> int:
    """Last day before the deficit first exceeds ``asd``.

    Returns the horizon when the deficit never exceeds it, and 0 when it
    already does on day 1.
    """
    if not 0.0 < asd < 1.0:
        raise ValueError("acceptable deficit must lie in (0, 1)")
    over = np.flatnonzero(np.asarray(curve) > asd)
    return int(over[0]) if over.size else len(curve)


# -- flexibility sweep --------------------------------------------------------------------------

@dataclass(frozen=True)
class SweepRow:
    t: int
    phi: float
    deficit: float
    gamma: float
    delta_reduction: float
    shipped_total: float
    efficient: bool


@dataclass
class SweepResult:
    grid: list[float]
    times: list[int]
    rows: list[SweepRow]
    runs: dict[float, RunResult]
    gamma_degenerate: np.ndarray

    def deficit_curve(self, phi: float) -> np.ndarray:
        return self.runs[phi].deficit

    def best_phi(self, t: int) -> float:
        """Flexibility with the lowest deficit on day ``t`` (smallest on ties)."""
        return min(self.grid, key=lambda p: (self.runs[p].deficit[t - 1], p))

    def at(self, t: int) -> list[SweepRow]:
        return [r for r in self.rows if r.t == t]

    def windows(self, asd: float) -> dict[float, int]:
        return {p: resupply_window(self.runs[p].deficit, asd) for p in self.grid}


def _run_one(args) -> RunResult:
    system, config, shock = args
    return Simulation(system, config).run(shock)


def sweep_phi(system: SimSystem, shock: ShockSpec | None, grid: Iterable[float],
              times: Iterable[int] | None = None, config: SimConfig = SimConfig(),
              workers: int = 1) -> SweepResult:
    """Run the system at each homogeneous flexibility and tabulate metrics.

    ``0`` and ``1`` are always run since both anchor the path-usage scale.
    A row is efficient when no smaller flexibility reaches at least the same
    deficit reduction on that day.
    """
    phis = sorted({float(p) for p in grid} | {0.0, 1.0})
    if phis[0] < 0 or phis[-1] > 1:
        raise ValueError("flexibility grid must lie in [0, 1]")
    days = list(range(1, config.horizon + 1)) if times is None else sorted(set(times))
    if days and (days[0] < 1 or days[-1] > config.horizon):
        raise ValueError("times must lie in [1, horizon]")
    for p in phis:
        system.split_matrix(p)   # fill the cache before the runs are shipped to workers
    jobs = [(system, replace(config, phi=p), shock) for p in phis]
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(_run_one, jobs))
    else:
        results = [_run_one(j) for j in jobs]
    runs = dict(zip(phis, results))
    rigid, flexible = runs[0.0].shipped_out, runs[1.0].shipped_out
    base = runs[0.0].deficit
    rows = []
    degenerate = np.zeros(config.horizon, dtype=bool)
    gammas = {}
    for p in phis:
        g, deg = path_usage(runs[p].shipped_out, rigid, flexible)
        gammas[p] = g
        degenerate |= deg
    for t in days:
        best_gain = -math.inf
        for p in phis:
            d = float(runs[p].deficit[t - 1])
            gain = float(base[t - 1]) - d
            efficient = gain > best_gain
            best_gain = max(best_gain, gain)
            rows.append(SweepRow(t, p, d, float(gammas[p][t - 1]), gain,
                                 float(runs[p].shipped_total[t - 1]), efficient))
    return SweepResult(phis, days, rows, runs, degenerate)


RUN_HEADER = ["t", "phi", "deficit", "gamma", "delta_reduction", "shipped_total"]


def write_runs(rows: Iterable[SweepRow], dest) -> None:
    with open(dest, "w", encoding="utf-8", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(RUN_HEADER)
        for r in rows:
            w.writerow([r.t, repr(r.phi), repr(r.deficit), repr(r.gamma), repr(r.delta_reduction),
                        repr(r.shipped_total)])
