"""Acceptance checks, one test per criterion, at the agreed tolerances.

Runtime budgets are asserted where they are part of the criterion.
"""
import json
import os
import subprocess
import sys
import time
from dataclasses import replace

import numpy as np
import pytest
import scipy.sparse as sp

from helpers import fig1_paths, random_log, ring_paths
from oracles import dense_second_modulus, random_absorbing_chain, unit_level_trace

from flexchain.cli import PRESETS
from flexchain.estimate import (ShipmentModel, fit_phi_homogeneous, fit_phi_per_distributor,
                                sample_shipments)
from flexchain.ingest import SynthSpec, generate_synthetic_system
from flexchain.pathrec import path_counts, reconstruct_paths
from flexchain.simulate import (ShockSpec, SimConfig, SimState, SimSystem, Simulation, simulate,
                                sweep_phi, write_runs)
from flexchain.spectral import ChainFamily, second_eigenvalue, slowdown_factor
from flexchain.tensors import build_one_step, build_two_step, mix

ROOT = os.path.dirname(os.path.dirname(os.path.abspath(__file__)))


# 1 -------------------------------------------------------------------------------

def test_toy_micro_scenario_is_exact():
    started = time.perf_counter()
    c = path_counts(fig1_paths())
    t2 = build_two_step(c)
    roles = {"MA": "manufacturer", "MC": "manufacturer", "A": "distributor", "C": "distributor",
             "D": "distributor", "E": "distributor"}
    holder = ["MA", "MC", "A", "C", "D", "D", "E"]
    source = ["*", "*", "MA", "MC", "A", "C", "D"]
    system = SimSystem(sorted(roles), roles, holder, source, np.zeros(7),
                       np.array([0, 0, 0, 0, 2.0, 2.0, 10.0]), t2, build_one_step(c, t2))
    for phi, probs, shipped in [(0.0, (1.0, 0.0), 2.0), (0.5, (0.75, 0.25), 3.0)]:
        t = system.tensor({"E": phi})
        assert (t[("E", "D", "A")], t[("E", "D", "C")]) == probs
        orders = np.zeros(len(system))
        orders[system.index[("E", "D")]] = 4.0
        state = SimState(0, system.target.copy(), np.zeros(len(system)), orders,
                         np.zeros(len(system)))
        _, flows = Simulation(system, SimConfig(phi={"E": phi})).step(state)
        assert flows.received[system.index[("E", "D")]] == shipped
    assert time.perf_counter() - started < 1.0


# 2 -------------------------------------------------------------------------------

def test_tensor_rows_stochastic_and_mix_affine():
    started = time.perf_counter()
    rng = np.random.default_rng(2024)
    worst_row, worst_affine = 0.0, 0.0
    for seed in range(100):
        spec = SynthSpec(n_manufacturers=int(rng.integers(1, 5)), n_distributors=int(rng.integers(5, 25)),
                         n_final_buyers=int(rng.integers(20, 60)), tiers=int(rng.integers(1, 4)),
                         overlap=float(rng.random()), seed=seed)
        cat, log = generate_synthetic_system(spec)
        c = path_counts(reconstruct_paths(log, cat))
        t2, t1 = build_two_step(c), build_one_step(c)
        lo, hi = mix(t2, t1, 0.0), mix(t2, t1, 1.0)
        for phi in rng.random(5):
            t = mix(t2, t1, float(phi))
            for tensor in (t2, t1, t):
                worst_row = max(worst_row, max(abs(s - 1) for s in tensor.row_sums().values()))
            for key in lo.entries.keys() | hi.entries.keys():
                worst_affine = max(worst_affine, abs(t[key] - (lo[key] + phi * (hi[key] - lo[key]))))
    assert worst_row <= 1e-12
    assert worst_affine <= 1e-12
    assert time.perf_counter() - started < 30


# 3 -------------------------------------------------------------------------------

def test_fifo_matches_unit_level_tracer():
    started = time.perf_counter()
    mismatched = []
    for seed in range(200):
        rng = np.random.default_rng(seed)
        cat, log = random_log(rng, int(rng.integers(1, 10_001)), n_days=int(rng.integers(1, 60)))
        pm = reconstruct_paths(log, cat)
        paths, censored, underflow = unit_level_trace(log, cat.roles)
        if (pm.paths, pm.censored, pm.underflow) != (paths, censored, underflow):
            mismatched.append(seed)
    assert mismatched == []
    assert time.perf_counter() - started < 120


# 4 -------------------------------------------------------------------------------

def test_maximum_likelihood_recovery():
    started = time.perf_counter()
    cat, log = generate_synthetic_system(SynthSpec(n_distributors=60, seed=1))
    model = ShipmentModel.from_counts(path_counts(reconstruct_paths(log, cat)))
    rng = np.random.default_rng(5)
    for phi in (0.0, 0.25, 0.5, 0.75, 1.0):
        est = fit_phi_homogeneous(model, sample_shipments(model, phi, 100_000, rng))
        assert abs(est.phi - phi) <= 0.05, phi

    ring = ShipmentModel.from_counts(path_counts(ring_paths(rng, n=10)))
    truth = {f"D{i}": float(x) for i, x in enumerate(rng.uniform(0, 1, 10))}
    est = fit_phi_per_distributor(ring, sample_shipments(ring, truth, 100_000, rng))
    assert est.converged
    for entity, value in truth.items():
        assert abs(est.phi[entity] - value) <= 0.1, entity
    assert time.perf_counter() - started < 300


# 5 -------------------------------------------------------------------------------

def test_second_eigenvalue_matches_dense_spectrum():
    started = time.perf_counter()
    rng = np.random.default_rng(55)
    for _ in range(50):
        M = random_absorbing_chain(rng, int(rng.integers(3, 501)), density=float(rng.uniform(0.02, 0.3)))
        expected = dense_second_modulus(M)
        for method in ("auto", "power"):
            got = second_eigenvalue(sp.csr_matrix(M), method=method, tol=1e-12)
            assert abs(got.modulus - expected) <= 1e-9, method
    family = ChainFamily(fig1_paths())
    assert slowdown_factor(family, 0.0).sigma == 1.0
    cat, log = generate_synthetic_system(SynthSpec(n_distributors=40, seed=3))
    assert slowdown_factor(ChainFamily(reconstruct_paths(log, cat)), 0.0).sigma == 1.0
    assert time.perf_counter() - started < 120


# 6 -------------------------------------------------------------------------------

def test_conservation_suite(tmp_path):
    """Every run audits mass (1e-9 relative), stocks and order splits daily
    and raises on a violation; here we also check byte-exact reruns."""
    started = time.perf_counter()
    shocks = [ShockSpec(0.3, 1, True), ShockSpec(0.0, 1, True), ShockSpec(0.8, 15, False),
              ShockSpec(1.0, 30, True)]
    for seed in range(3):
        cat, log = generate_synthetic_system(SynthSpec(n_distributors=25, n_final_buyers=120,
                                                       seed=seed, buffer_days=(1.0, 12.0),
                                                       buffer_skew=0.8))
        system = SimSystem.from_data(log, cat)
        for k, shock in enumerate(shocks):
            cfg = SimConfig(horizon=120, audit=True, audit_tol=1e-9)
            sweep = sweep_phi(system, shock, [0.0, 0.3, 0.7, 1.0], config=cfg)
            assert all(run.min_stock >= 0.0 for run in sweep.runs.values())
            first, second = tmp_path / f"a{seed}{k}.csv", tmp_path / f"b{seed}{k}.csv"
            write_runs(sweep.rows, first)
            write_runs(sweep_phi(system, shock, [0.0, 0.3, 0.7, 1.0], config=cfg).rows, second)
            assert first.read_bytes() == second.read_bytes()
        run = simulate(system, SimConfig(phi=0.5, horizon=60))
        split = system.split_matrix(0.5)
        distributor_rows = np.asarray(split.sum(axis=1)).ravel()
        assert np.all(np.isin(distributor_rows, (0.0,)) | (np.abs(distributor_rows - 1) <= 1e-12))
        assert run.min_stock >= 0.0
    assert time.perf_counter() - started < 300


# 7 -------------------------------------------------------------------------------

@pytest.fixture(scope="module")
def bundled_sweep():
    cat, log = generate_synthetic_system(PRESETS["stress"])
    system = SimSystem.from_data(log, cat)
    started = time.perf_counter()
    sweep = sweep_phi(system, ShockSpec(0.3, 1, True), [round(0.1 * i, 1) for i in range(11)],
                      config=SimConfig(horizon=180))
    return sweep, time.perf_counter() - started


def test_qualitative_shape_on_bundled_system(bundled_sweep):
    sweep, elapsed = bundled_sweep
    assert elapsed < 60
    assert len(sweep.grid) == 11
    for phi in sweep.grid:
        assert np.all(np.diff(sweep.deficit_curve(phi)) >= 0), phi

    best = sweep.best_phi(40)
    gain = {r.phi: r.delta_reduction for r in sweep.at(40)}
    assert gain[best] > 0

    for t in sweep.times:
        gammas = [r.gamma for r in sorted(sweep.at(t), key=lambda r: r.phi)]
        assert all(b >= a for a, b in zip(gammas, gammas[1:])), t

    windows = sweep.windows(0.05)
    assert windows[best] > windows[0.0]

    inefficient_days = [t for t in sweep.times
                        if max(r.delta_reduction for r in sweep.at(t)) > 0
                        and any(not r.efficient for r in sweep.at(t))]
    assert inefficient_days


# 8 -------------------------------------------------------------------------------

def test_reconstruction_scale():
    script = os.path.join(ROOT, "scripts", "scale_check.py")
    proc = subprocess.run([sys.executable, script, "--transactions", "10000000"],
                          capture_output=True, text=True, timeout=900, check=True)
    report = json.loads(proc.stdout.strip().splitlines()[-1])
    assert report["transactions"] == 10_000_000
    assert report["reconstruct_s"] < 120
    assert report["peak_rss_mb"] < 4096
