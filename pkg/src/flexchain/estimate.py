"""Maximum-likelihood flexibility estimation.

A :class:`ShipmentModel` holds the two limit order tensors and the order
volumes of a training window. For a flexibility vector it gives shipment
probabilities per source slice; observed shipment counts from a later window
are scored with the multinomial log-likelihood.
"""
from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass, field
from typing import Callable, Iterable, Mapping

import numpy as np

from .pathrec import CountTensor, PathMultiset, distributor_positions, path_counts
from .tensors import TransitionTensor, build_one_step, build_two_step, order_volumes

logger = logging.getLogger(__name__)

Triple = tuple[str, str, str]
GOLDEN = (math.sqrt(5.0) - 1.0) / 2.0


class EstimationError(ValueError):
    pass


@dataclass(frozen=True)
class EstimationWindow:
    train_days: int
    horizon_days: int
    split_day: int | None = None
    year: int | None = None

    def __post_init__(self):
        if self.train_days <= 0 or self.horizon_days <= 0:
            raise ValueError("window lengths must be positive")


@dataclass
class FlexibilityEstimate:
    phi: dict[str, float] | float
    loglik: float
    iterations: int
    converged: bool
    flat: bool | dict[str, bool] = False
    mismatches: list[tuple[Triple, float]] = field(default_factory=list)


def observed_shipments(counts: CountTensor) -> dict[Triple, float]:
    """Turn order-direction counts ``A[(i, j, k)]`` into shipment counts
    ``(k, j, i)``: goods from ``k`` via ``j`` to ``i``."""
    return {(k, j, i): v for (i, j, k), v in counts.entries.items() if v > 0}


class ShipmentModel:
    """Vectorized shipment-probability family over the union support of the
    two limit tensors.

    Entry ``e`` is the order triple ``(orderer, via, source)``; its
    un-normalized shipment weight at flexibility ``phi`` is
    ``(t2[e] + phi[orderer] * (t1[e] - t2[e])) * v[orderer]`` and shipment
    probabilities normalize these weights within each source.
    """

    def __init__(self, two_step: TransitionTensor, one_step: TransitionTensor,
                 volumes: Mapping[str, float] | None = None, free_tol: float = 1e-9):
        keys = sorted(two_step.entries.keys() | one_step.entries.keys())
        if volumes is not None:
            keys = [k for k in keys if volumes.get(k[0], 0.0) > 0]
        self.keys = keys
        self.index = {k: x for x, k in enumerate(keys)}
        orderers = sorted({k[0] for k in keys})
        sources = sorted({k[2] for k in keys})
        self.entities = orderers
        self.entity_index = {e: x for x, e in enumerate(orderers)}
        self.sources = sources
        src_index = {s: x for x, s in enumerate(sources)}
        self.orderer = np.array([self.entity_index[k[0]] for k in keys], dtype=np.int64)
        self.source = np.array([src_index[k[2]] for k in keys], dtype=np.int64)
        self.t2 = np.array([two_step.entries.get(k, 0.0) for k in keys])
        self.t1 = np.array([one_step.entries.get(k, 0.0) for k in keys])
        self.v = np.array([1.0 if volumes is None else float(volumes[k[0]]) for k in keys])
        self.diff = self.t1 - self.t2
        # entities whose flexibility changes anything beyond rounding noise
        self.distance = 0.5 * np.bincount(self.orderer, weights=np.abs(self.diff),
                                          minlength=len(orderers))
        moving = self.distance > free_tol
        self.free = [orderers[x] for x in np.flatnonzero(moving)]
        self._by_orderer = _group(self.orderer, len(orderers))

    @classmethod
    def from_counts(cls, counts: CountTensor) -> "ShipmentModel":
        t2 = build_two_step(counts)
        return cls(t2, build_one_step(counts, t2), order_volumes(counts))

    def phi_vector(self, phi: float | Mapping[str, float]) -> np.ndarray:
        if isinstance(phi, Mapping):
            vec = np.array([float(phi.get(e, 0.0)) for e in self.entities])
        else:
            vec = np.full(len(self.entities), float(phi))
        if np.any((vec < 0) | (vec > 1)) or np.any(np.isnan(vec)):
            raise EstimationError("flexibility values must lie in [0, 1]")
        return vec

    def weights(self, phi_vec: np.ndarray) -> np.ndarray:
        return (self.t2 + phi_vec[self.orderer] * self.diff) * self.v

    def probabilities(self, phi: float | Mapping[str, float]) -> dict[Triple, float]:
        """Shipment tensor entries keyed in shipment direction (source, via, orderer)."""
        w = self.weights(self.phi_vector(phi))
        tot = np.bincount(self.source, weights=w, minlength=len(self.sources))
        out = {}
        for (i, j, k), x, s in zip(self.keys, w, self.source):
            if x > 0:
                out[(k, j, i)] = x / tot[s]
        return out

    def observe(self, shipments: Mapping[Triple, float]) -> "Observation":
        """Align shipment counts (shipment direction) with the model support.

        Counts on triples the model cannot produce at any flexibility are
        set aside as mismatches.
        """
        n = np.zeros(len(self.keys))
        mismatches = []
        for (src, via, dst), c in shipments.items():
            if c <= 0:
                continue
            x = self.index.get((dst, via, src))
            if x is None:
                mismatches.append(((src, via, dst), float(c)))
            else:
                n[x] += c
        if mismatches:
            logger.info("%d observed shipment triples lie outside the model support", len(mismatches))
        return Observation(self, n, sorted(mismatches))


def _group(labels: np.ndarray, n: int) -> list[np.ndarray]:
    order = np.argsort(labels, kind="stable")
    bounds = np.searchsorted(labels[order], np.arange(n + 1))
    return [order[bounds[x]:bounds[x + 1]] for x in range(n)]


class Observation:
    def __init__(self, model: ShipmentModel, counts: np.ndarray, mismatches):
        self.model = model
        self.n = counts
        self.mismatches = mismatches
        self.N = np.bincount(model.source, weights=counts, minlength=len(model.sources))
        self._hit = counts > 0
        self._slices = np.flatnonzero(self.N > 0)

    @property
    def total(self) -> float:
        return float(self.n.sum())

    def loglik(self, phi_vec: np.ndarray) -> float:
        m = self.model
        w = m.weights(phi_vec)
        num = w[self._hit]
        if np.any(num <= 0):
            return -math.inf
        tot = np.bincount(m.source, weights=w, minlength=len(m.sources))[self._slices]
        return float(np.dot(self.n[self._hit], np.log(num)) - np.dot(self.N[self._slices], np.log(tot)))

    def zero_probability_triples(self, phi_vec: np.ndarray) -> list[Triple]:
        w = self.model.weights(phi_vec)
        bad = np.flatnonzero(self._hit & (w <= 0))
        return [tuple(reversed(self.model.keys[x])) for x in bad]

    def coordinate(self, entity: str, phi_vec: np.ndarray) -> Callable[[float], float]:
        """Log-likelihood as a function of one entity's flexibility, up to
        a constant; only the entries and source slices it touches are summed."""
        m = self.model
        own = m._by_orderer[m.entity_index[entity]]
        srcs = np.unique(m.source[own])
        w = m.weights(phi_vec)
        tot_all = np.bincount(m.source, weights=w, minlength=len(m.sources))
        own_w = np.bincount(m.source[own], weights=w[own], minlength=len(m.sources))[srcs]
        rest = tot_all[srcs] - own_w
        n_own, hit = self.n[own], self._hit[own]
        t2, d, v, s_loc = m.t2[own], m.diff[own], m.v[own], np.searchsorted(srcs, m.source[own])
        N_s = self.N[srcs]
        use = N_s > 0

        def f(x: float) -> float:
            ww = (t2 + x * d) * v
            if np.any(ww[hit] <= 0):
                return -math.inf
            tot = rest + np.bincount(s_loc, weights=ww, minlength=len(srcs))
            tot = np.maximum(tot, 1e-300)
            return float(np.dot(n_own[hit], np.log(ww[hit])) - np.dot(N_s[use], np.log(tot[use])))
        return f


def log_likelihood(model: ShipmentModel, observed: Mapping[Triple, float] | Observation,
                   phi: float | Mapping[str, float]) -> float:
    """Multinomial log-likelihood of shipment counts at flexibility ``phi``.

    Returns ``-inf`` when a counted triple has zero probability; counts on
    triples outside the model support are ignored (see :meth:`ShipmentModel.observe`).
    """
    obs = observed if isinstance(observed, Observation) else model.observe(observed)
    vec = model.phi_vector(phi)
    if obs.total == 0:
        return 0.0
    return obs.loglik(vec)


# -- 1-D maximization --------------------------------------------------------------

@dataclass
class _Max1D:
    x: float
    fx: float
    evaluations: int
    flat: bool


def maximize_1d(f: Callable[[float], float], grid: int = 21, tol: float = 1e-4,
                flat_tol: float = 1e-9) -> _Max1D:
    """Grid scan over [0, 1] followed by golden-section refinement around
    the best grid point. Ties and flat surfaces resolve to the smallest x."""
    if grid < 11:
        raise ValueError("grid needs at least 11 points")
    xs = np.linspace(0.0, 1.0, grid)
    fs = np.array([f(float(x)) for x in xs])
    evals = grid
    if not np.any(np.isfinite(fs)):
        raise EstimationError("log-likelihood is -inf on the whole grid")
    ok = np.isfinite(fs)
    finite = fs[ok]
    if finite.max() - finite.min() <= flat_tol * (1.0 + abs(finite.max())):
        # flat wherever defined: smallest admissible grid point
        first = int(np.flatnonzero(ok)[0])
        return _Max1D(float(xs[first]), float(fs[first]), evals, True)
    b = int(np.argmax(fs))
    lo, hi = xs[max(b - 1, 0)], xs[min(b + 1, grid - 1)]
    a, c = lo, hi
    x1, x2 = c - GOLDEN * (c - a), a + GOLDEN * (c - a)
    f1, f2 = f(x1), f(x2)
    evals += 2
    while c - a > tol:
        if f1 >= f2:
            c, x2, f2 = x2, x1, f1
            x1 = c - GOLDEN * (c - a)
            f1 = f(x1)
        else:
            a, x1, f1 = x1, x2, f2
            x2 = a + GOLDEN * (c - a)
            f2 = f(x2)
        evals += 1
    x_ref, f_ref = (x1, f1) if f1 >= f2 else (x2, f2)
    best_x, best_f = float(xs[b]), float(fs[b])
    # prefer exact bracket ends (including the interval boundaries) on ties
    for x, fx in sorted([(float(lo), f(float(lo))), (float(hi), f(float(hi)))]):
        evals += 1
        if fx > best_f:
            best_x, best_f = x, fx
    if f_ref > best_f + 1e-12 * (1.0 + abs(best_f)):
        best_x, best_f = float(x_ref), float(f_ref)
    return _Max1D(best_x, best_f, evals, False)


def fit_phi_homogeneous(model: ShipmentModel, observed, grid: int = 21, tol: float = 1e-4
                        ) -> FlexibilityEstimate:
    """Single flexibility shared by every orderer."""
    obs = observed if isinstance(observed, Observation) else model.observe(observed)
    if not model.free:
        return FlexibilityEstimate(0.0, obs.loglik(model.phi_vector(0.0)), 0, True, True,
                                   obs.mismatches)
    res = maximize_1d(lambda x: obs.loglik(model.phi_vector(x)), grid, tol)
    return FlexibilityEstimate(res.x, res.fx, res.evaluations, True, res.flat, obs.mismatches)


def fit_phi_per_distributor(model: ShipmentModel, observed, max_sweeps: int = 200,
                            grid: int = 11, tol: float = 1e-4, gain_tol: float = 1e-6,
                            entities: Iterable[str] | None = None,
                            start: float | Mapping[str, float] | None = None) -> FlexibilityEstimate:
    """Coordinate ascent over per-entity flexibility.

    Each sweep maximizes the likelihood along one coordinate at a time
    (grid scan plus golden section); sweeps stop once the total gain falls
    below ``gain_tol``. Entities whose two limit tensors coincide do not
    affect the likelihood; they get 0 and a flatness flag.

    The default starting point is the shared-flexibility fit. Starting from
    zero is a poor choice when alternative routes were observed: the
    likelihood is then -inf at zero and single-coordinate moves stall near
    the boundary.
    """
    if max_sweeps < 1:
        raise ValueError("max_sweeps must be >= 1")
    obs = observed if isinstance(observed, Observation) else model.observe(observed)
    if start is None:
        start = fit_phi_homogeneous(model, obs, grid=max(grid, 11), tol=tol).phi
    phi = model.phi_vector(start)
    free = [e for e in model.free if entities is None or e in set(entities)]
    flat = {e: True for e in model.entities}
    current = obs.loglik(phi)
    sweeps = 0
    converged = False
    for sweeps in range(1, max_sweeps + 1):
        before = current
        for e in free:
            x = model.entity_index[e]
            f = obs.coordinate(e, phi)
            here = f(float(phi[x]))
            res = maximize_1d(f, grid, tol)
            flat[e] = res.flat
            if res.fx > here or (res.flat and res.fx >= here - 1e-9 * (1.0 + abs(here))):
                phi[x] = res.x
        current = obs.loglik(phi)
        if current < before - 1e-9 * (1.0 + abs(before)):
            raise EstimationError("coordinate ascent decreased the log-likelihood")
        if current - before < gain_tol:
            converged = True
            break
    return FlexibilityEstimate({e: float(phi[model.entity_index[e]]) for e in model.entities},
                               current, sweeps, converged, flat, obs.mismatches)


# -- year to year -------------------------------------------------------------------

@dataclass
class YearFit:
    entity: str
    year: int
    phi_hat: float
    loglik: float
    flat: bool
    mean_position: float | None


def year_to_year_flexibility(paths_by_year: Mapping[int, PathMultiset], catalog=None,
                             max_sweeps: int = 200, grid: int = 11
                             ) -> tuple[list[YearFit], dict[int, list[str]]]:
    """Fit per-distributor flexibility for every year with a predecessor.

    Preferences are learnt from year ``y - 1`` paths and scored on year
    ``y`` shipments. Returns the fitted rows and, per year, the
    distributors seen in ``y`` that could not be fitted because they placed
    no orders in ``y - 1``.
    """
    years = sorted(paths_by_year)
    rows: list[YearFit] = []
    skipped: dict[int, list[str]] = {}
    for prev, y in zip(years, years[1:]):
        if y != prev + 1:
            continue
        train = path_counts(paths_by_year[prev])
        test = path_counts(paths_by_year[y])
        model = ShipmentModel.from_counts(train)
        obs = model.observe(observed_shipments(test))
        fit = fit_phi_per_distributor(model, obs, max_sweeps=max_sweeps, grid=grid)
        positions = distributor_positions(paths_by_year[y]) if paths_by_year[y].paths else {}
        known = set(model.entities)
        now = {i for (i, _, _) in test.entries}
        if catalog is not None:
            now = {e for e in now if e in catalog and catalog.role(e) == "distributor"}
            known_d = {e for e in known if e in catalog and catalog.role(e) == "distributor"}
        else:
            known_d = known
        skipped[y] = sorted(now - known)
        per_entity = _entity_loglik(obs, model, fit.phi)
        for e in sorted(known_d & now):
            rows.append(YearFit(e, y, fit.phi[e], per_entity.get(e, 0.0), bool(fit.flat.get(e, True)),
                                positions.get(e)))
    return rows, skipped


def _entity_loglik(obs: Observation, model: ShipmentModel, phi: Mapping[str, float]) -> dict[str, float]:
    """Share of the log-likelihood from shipments addressed to each orderer."""
    m = model
    w = m.weights(m.phi_vector(phi))
    tot = np.bincount(m.source, weights=w, minlength=len(m.sources))
    with np.errstate(divide="ignore"):
        logp = np.where(obs.n > 0, np.log(np.where(w > 0, w, 1.0) / np.where(tot[m.source] > 0,
                                                                          tot[m.source], 1.0)), 0.0)
    contrib = np.bincount(m.orderer, weights=obs.n * logp, minlength=len(m.entities))
    return {e: float(contrib[x]) for x, e in enumerate(m.entities)}


def position_profile(rows: Iterable[YearFit], bin_width: float = 0.5) -> list[dict]:
    """Median and 50% / 95% bands of fitted flexibility binned by mean path position."""
    if bin_width <= 0:
        raise ValueError("bin_width must be positive")
    bins: dict[int, list[float]] = {}
    for r in rows:
        if r.mean_position is None:
            continue
        bins.setdefault(int(math.floor(r.mean_position / bin_width)), []).append(r.phi_hat)
    out = []
    for b in sorted(bins):
        vals = np.array(bins[b])
        q = np.quantile(vals, [0.025, 0.25, 0.5, 0.75, 0.975])
        out.append(dict(position_low=b * bin_width, position_high=(b + 1) * bin_width, n=len(vals),
                        median=q[2], low50=q[1], high50=q[3], low95=q[0], high95=q[4]))
    return out


FIT_HEADER = ["entity_id", "year", "phi_hat", "loglik", "flat_flag", "mean_position"]


def write_fits(rows: Iterable[YearFit], dest) -> None:
    with open(dest, "w", encoding="utf-8", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(FIT_HEADER)
        for r in rows:
            w.writerow((r.entity, r.year, repr(r.phi_hat), repr(r.loglik), int(r.flat),
                        "" if r.mean_position is None else repr(r.mean_position)))


# -- sampling (used for recovery checks and demos) ----------------------------------

def sample_shipments(model: ShipmentModel, phi: float | Mapping[str, float], n: int,
                     rng: np.random.Generator) -> dict[Triple, int]:
    """Draw ``n`` shipments: a source with probability proportional to its
    total weight, then a route from that source's shipment distribution."""
    w = model.weights(model.phi_vector(phi))
    tot = np.bincount(model.source, weights=w, minlength=len(model.sources))
    per_source = rng.multinomial(n, tot / tot.sum())
    out: dict[Triple, int] = {}
    groups = _group(model.source, len(model.sources))
    for s, idx in enumerate(groups):
        if per_source[s] == 0 or tot[s] <= 0:
            continue
        draws = rng.multinomial(per_source[s], w[idx] / tot[s])
        for x, c in zip(idx.tolist(), draws.tolist()):
            if c:
                i, j, k = model.keys[x]
                out[(k, j, i)] = c
    return out
