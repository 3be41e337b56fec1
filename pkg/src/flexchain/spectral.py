"""Second eigenvalue of absorbing chains and the slow-down factor.

A chain converges to its stationary distribution at a rate set by the
second-largest eigenvalue modulus; the number of steps scales like
``-1 / log|lambda2|``. The slow-down factor compares that time scale at
flexibility ``phi`` with the one at ``phi = 0``.
"""
from __future__ import annotations

import csv
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from typing import Iterable, Mapping, Sequence

import numpy as np
import scipy.linalg
import scipy.sparse as sp

from .pathrec import PathMultiset, exit_fractions, final_distributors, path_counts
from .tensors import (SecondOrderGraph, build_one_step, build_shipment_tensor, build_two_step,
                      mix, to_second_order)

DENSE_LIMIT = 500


class SpectralError(ArithmeticError):
    pass


@dataclass(frozen=True)
class EigenResult:
    modulus: float
    degenerate: bool
    method: str
    iterations: int = 0


def _check_stochastic(M, atol: float = 1e-10) -> None:
    rows = np.asarray(M.sum(axis=1)).ravel()
    if rows.size and np.max(np.abs(rows - 1.0)) > atol:
        raise ValueError(f"matrix is not row-stochastic (max row error {np.max(np.abs(rows - 1.0)):.3g})")


def _absorbing_states(M) -> np.ndarray:
    d = M.diagonal() if sp.issparse(M) else np.diag(M)
    return np.flatnonzero(d >= 1.0 - 1e-15)


def second_eigenvalue(M, tol: float = 1e-10, method: str = "auto", *,
                      stationary: np.ndarray | None = None, block: int = 12,
                      max_iter: int = 20_000, degenerate_gap: float = 1e-9) -> EigenResult:
    """Modulus of the second-largest-magnitude eigenvalue of a stochastic matrix.

    ``method="dense"`` computes the full spectrum (default up to 500 states);
    ``"power"`` runs block power iteration on the transpose with the leading
    eigenpair deflated. The leading left eigenvector is the stationary
    distribution: the indicator of the absorbing state when there is exactly
    one, otherwise it is computed (or passed in as ``stationary``). Two or
    more absorbing states make 1 a repeated eigenvalue: the result is 1 with
    the degenerate flag set.
    """
    n = M.shape[0]
    if M.shape != (n, n):
        raise ValueError("matrix must be square")
    _check_stochastic(M)
    if n < 2:
        return EigenResult(0.0, False, "trivial")
    if method == "auto":
        method = "dense" if n <= DENSE_LIMIT else "power"
    if method == "dense":
        A = M.toarray() if sp.issparse(M) else np.asarray(M, dtype=float)
        mods = np.sort(np.abs(scipy.linalg.eigvals(A)))[::-1]
        lam2 = float(min(mods[1], 1.0))
        return EigenResult(lam2, lam2 >= 1.0 - degenerate_gap, "dense")
    if method != "power":
        raise ValueError(f"unknown method {method!r}")

    A = sp.csr_matrix(M, dtype=float)
    if stationary is None:
        absorbing = _absorbing_states(A)
        if len(absorbing) >= 2:
            return EigenResult(1.0, True, "power")
        if len(absorbing) == 1:
            stationary = np.zeros(n)
            stationary[absorbing[0]] = 1.0
        else:
            stationary = _stationary(A, tol, max_iter)
    pi = np.asarray(stationary, dtype=float)
    At = A.T.tocsr()

    def apply(X):
        # (M^T - pi 1^T) X: removes the eigenvalue 1, keeps the rest of the spectrum
        return At @ X - np.outer(pi, X.sum(axis=0))

    p = min(block, n - 1)
    Q, _ = np.linalg.qr(np.random.default_rng(12345).standard_normal((n, p)))
    for it in range(1, max_iter + 1):
        Z = apply(Q)
        if np.linalg.norm(Z) <= tol:
            # the deflated operator annihilates the block: the rest of the spectrum is
            # (numerically) zero, as for chains whose transient part has no cycles
            return EigenResult(0.0, False, "power", it)
        H = Q.T @ Z
        w, V = np.linalg.eig(H)
        x = int(np.argmax(np.abs(w)))
        theta, v = w[x], V[:, x]
        y = Q @ v
        residual = np.linalg.norm(Z @ v - theta * y) / max(np.linalg.norm(y), 1e-300)
        if residual <= tol:
            top = float(abs(theta))
            return EigenResult(min(top, 1.0), top >= 1.0 - degenerate_gap, "power", it)
        Q, _ = np.linalg.qr(Z)
    raise SpectralError(f"power iteration did not converge in {max_iter} iterations")


def _stationary(A, tol: float, max_iter: int) -> np.ndarray:
    n = A.shape[0]
    x = np.full(n, 1.0 / n)
    At = A.T.tocsr()
    for _ in range(max_iter):
        y = At @ x
        y /= y.sum()
        if np.abs(y - x).sum() < tol:
            return y
        x = y
    raise SpectralError("stationary distribution did not converge")


# -- slow-down factor -------------------------------------------------------------

@dataclass(frozen=True)
class SlowdownResult:
    phi: float | Mapping[str, float]
    lambda2_base: float
    lambda2_flex: float
    sigma: float
    degenerate: bool = False


def slowdown_ratio(base: float, flex: float) -> float:
    """``log|base| / log|flex|`` with the limits spelled out: equal moduli
    give exactly 1, a vanishing flexible modulus gives 0 and a unit one inf."""
    if base == flex:
        return 1.0
    if flex == 0.0:
        return 0.0
    if base == 0.0 or flex >= 1.0:
        return math.inf
    if base >= 1.0:
        return 0.0
    return math.log(base) / math.log(flex)


class ChainFamily:
    """Second-order shipment chains over a fixed path multiset, indexed by
    flexibility. Volumes are all one; exit probabilities are the empirical
    share of each final distributor's volume shipped to final buyers."""

    def __init__(self, paths: PathMultiset, dangling: str = "absorb", tol: float = 1e-12):
        counts = path_counts(paths)
        self.two_step = build_two_step(counts)
        self.one_step = build_one_step(counts, self.two_step)
        self.final = final_distributors(paths)
        self.exit = exit_fractions(paths)
        self.dangling = dangling
        self.tol = tol
        self._cache: dict = {}

    def graph(self, phi: float | Mapping[str, float]) -> SecondOrderGraph:
        T = mix(self.two_step, self.one_step, phi)
        return to_second_order(build_shipment_tensor(T, None), self.final, self.exit, self.dangling)

    def matrix(self, phi):
        return self.graph(phi).matrix()

    def modulus(self, phi) -> EigenResult:
        key = _phi_key(phi)
        if key not in self._cache:
            self._cache[key] = second_eigenvalue(self.matrix(phi), tol=self.tol)
        return self._cache[key]


def _phi_key(phi):
    if isinstance(phi, Mapping):
        return tuple(sorted((k, float(v)) for k, v in phi.items() if v != 0.0)) or 0.0
    return float(phi)


def _is_zero(phi) -> bool:
    return _phi_key(phi) == 0.0


def slowdown_factor(family: ChainFamily, phi: float | Mapping[str, float]) -> SlowdownResult:
    """Ratio of convergence time scales of the chain at ``phi`` and at zero.

    ``phi = 0`` returns ``sigma = 1`` exactly without a second eigen-solve.
    """
    base = family.modulus(0.0)
    flex = base if _is_zero(phi) else family.modulus(phi)
    sigma = 1.0 if _is_zero(phi) else slowdown_ratio(base.modulus, flex.modulus)
    degenerate = base.degenerate or flex.degenerate or base.modulus == 0.0 or flex.modulus == 0.0
    return SlowdownResult(phi, base.modulus, flex.modulus, sigma, degenerate)


def resample_paths(paths: PathMultiset, rng: np.random.Generator) -> PathMultiset:
    """Multinomial resample of all packages over the observed paths
    (censored paths included), keeping the total package count."""
    keys = [("p", k) for k in paths.paths] + [("c", k) for k in paths.censored]
    counts = np.array(list(paths.paths.values()) + list(paths.censored.values()), dtype=float)
    draw = rng.multinomial(int(counts.sum()), counts / counts.sum())
    out = PathMultiset(window=paths.window)
    for (kind, key), n in zip(keys, draw.tolist()):
        if n:
            (out.paths if kind == "p" else out.censored)[key] = n
    return out


@dataclass(frozen=True)
class SlowdownRow:
    phi: float
    lambda2_base: float
    lambda2_flex: float
    sigma: float
    ci_low50: float
    ci_high50: float
    ci_low95: float
    ci_high95: float


def _bootstrap_worker(args) -> list[float]:
    paths, phis, seed = args
    fam = ChainFamily(resample_paths(paths, np.random.default_rng(seed)))
    return [slowdown_factor(fam, p).sigma for p in phis]


def bootstrap_slowdown(paths: PathMultiset, phis: Sequence[float], n_samples: int = 1000,
                       seed: int = 0, workers: int = 1) -> list[SlowdownRow]:
    """Slow-down factor at each ``phi`` with 50% and 95% percentile bands
    from resampling paths, rebuilding the chain and recomputing the factor."""
    fam = ChainFamily(paths)
    point = [slowdown_factor(fam, p) for p in phis]
    seeds = np.random.SeedSequence(seed).generate_state(max(n_samples, 0), dtype=np.uint64).tolist()
    jobs = [(paths, list(phis), s) for s in seeds]
    if workers > 1 and n_samples > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            samples = list(pool.map(_bootstrap_worker, jobs, chunksize=max(1, n_samples // (4 * workers))))
    else:
        samples = [_bootstrap_worker(j) for j in jobs]
    arr = np.array(samples, dtype=float).reshape(len(samples), len(phis))
    rows = []
    for x, (phi, res) in enumerate(zip(phis, point)):
        if len(arr):
            # order statistics rather than interpolation: samples may be infinite
            q = np.quantile(arr[:, x], [0.25, 0.75, 0.025, 0.975], method="inverted_cdf")
        else:
            q = [res.sigma] * 4
        rows.append(SlowdownRow(float(phi), res.lambda2_base, res.lambda2_flex, res.sigma,
                                float(q[0]), float(q[1]), float(q[2]), float(q[3])))
    return rows


SLOWDOWN_HEADER = ["phi", "lambda2_base", "lambda2_flex", "sigma",
                   "ci_low50", "ci_high50", "ci_low95", "ci_high95"]


def write_slowdown(rows: Iterable[SlowdownRow], dest) -> None:
    with open(dest, "w", encoding="utf-8", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(SLOWDOWN_HEADER)
        for r in rows:
            w.writerow([repr(float(getattr(r, h))) for h in SLOWDOWN_HEADER])
