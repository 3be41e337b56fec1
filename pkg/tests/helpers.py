"""Small builders shared by several test modules."""
from __future__ import annotations

import numpy as np

from flexchain.ingest import EntityCatalog, Transaction, TransactionLog, parse_day


def catalog(manufacturers=(), distributors=(), finals=()) -> EntityCatalog:
    roles = {m: "manufacturer" for m in manufacturers}
    roles.update({d: "distributor" for d in distributors})
    roles.update({f: "final-buyer" for f in finals})
    return EntityCatalog(roles)


def log_of(rows) -> TransactionLog:
    """rows: (iso date or day int, seller, buyer, product, quantity)."""
    out = []
    for d, s, b, p, q in rows:
        out.append(Transaction(parse_day(d) if isinstance(d, str) else d, s, b, p, q))
    out.sort(key=lambda t: t.date)
    return TransactionLog.from_transactions(out)


def random_log(rng: np.random.Generator, n: int, *, n_manuf=3, n_dist=6, n_final=4,
               n_products=2, n_days=20, max_qty=12):
    """Arbitrary (not necessarily stock-consistent) log over a small universe.

    Distributors ship in and out in random order, so underflow, same-day
    chains and same-day cycles all occur.
    """
    ms = [f"M{i}" for i in range(n_manuf)]
    ds = [f"D{i}" for i in range(n_dist)]
    fs = [f"F{i}" for i in range(n_final)]
    cat = catalog(ms, ds, fs)
    sellers = ms + ds
    rows = []
    for _ in range(n):
        s = sellers[rng.integers(len(sellers))]
        buyers = [x for x in ds + fs if x != s]
        b = buyers[rng.integers(len(buyers))]
        rows.append((int(rng.integers(n_days)), s, b, f"P{rng.integers(n_products)}",
                     int(rng.integers(1, max_qty + 1))))
    return cat, log_of(rows)


FIG1_ROLES = dict(A="distributor", C="distributor", D="distributor", E="distributor",
                  MA="manufacturer", MC="manufacturer", F="final-buyer")


def fig1_paths():
    """Paths of the four-distributor toy: D buys equally from A and C, and
    E only ever receives A-sourced goods through D."""
    from flexchain.pathrec import PathMultiset
    return PathMultiset({
        (("MA", "A", "D"), "X"): 2,
        (("MC", "C", "D"), "X"): 6,
        (("MA", "A", "D", "E"), "X"): 4,
    })


def ring_paths(rng, n: int = 10):
    """Distributors D0..D{n-1}: each buys a little P from M1 and much Q from
    M2 directly, and mostly P (a little Q) through its ring neighbour. The
    neighbour's own sourcing is close to even over M1, M2 and its own
    neighbour, so every distributor's one-step and two-step preferences
    differ, and every manufacturer source slice mixes observed and
    alternative routes."""
    from flexchain.pathrec import PathMultiset
    paths = {}
    for i in range(n):
        d, nxt = f"D{i}", f"D{(i + 1) % n}"
        paths[(("M1", d), "P")] = int(rng.integers(50, 100))
        paths[(("M2", d), "Q")] = int(rng.integers(400, 700))
        paths[(("M1", nxt, d), "P")] = int(rng.integers(400, 700))
        paths[(("M2", nxt, d), "Q")] = int(rng.integers(20, 60))
    return PathMultiset(paths)
