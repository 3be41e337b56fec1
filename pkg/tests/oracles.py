"""Slow, obviously-correct reference implementations used by the test suite.

Nothing here imports the production algorithms it checks: the FIFO tracer
moves one token per package, the eigen oracle calls a dense full-spectrum
solver, and the simulation oracle loops over dictionaries.
"""
from __future__ import annotations

from collections import Counter, defaultdict, deque

import numpy as np

from flexchain.ingest import TransactionLog


# -- FIFO --------------------------------------------------------------------

def same_day_order(log: TransactionLog) -> list[int]:
    """Replay order: by day, then by the depth of the seller's (entity,
    product) queue in that day's hand-off graph with cycles collapsed, then
    by input position."""
    level = [0] * len(log)
    by_day = defaultdict(list)
    for i in range(len(log)):
        by_day[int(log.day[i])].append(i)
    for rows in by_day.values():
        edges = defaultdict(set)
        for i in rows:
            p = int(log.product[i])
            edges[(int(log.seller[i]), p)].add((int(log.buyer[i]), p))
        nodes = set(edges) | {b for bs in edges.values() for b in bs}

        def reach(a):
            seen, stack = {a}, [a]
            while stack:
                for b in edges.get(stack.pop(), ()):
                    if b not in seen:
                        seen.add(b)
                        stack.append(b)
            return seen

        reachable = {a: reach(a) for a in nodes}
        preds = defaultdict(set)   # strictly earlier nodes with an edge into x
        for a in nodes:
            for b in edges.get(a, ()):
                if a not in reachable[b]:
                    preds[b].add(a)
        cycle_mates = {a: {b for b in reachable[a] if a in reachable[b]} for a in nodes}
        memo: dict = {}

        def depth(a):
            if a not in memo:
                incoming = set().union(*(preds[m] for m in cycle_mates[a]))
                memo[a] = max((depth(x) + 1 for x in incoming), default=0)
            return memo[a]

        for i in rows:
            level[i] = depth((int(log.seller[i]), int(log.product[i])))
    return sorted(range(len(log)), key=lambda i: (int(log.day[i]), level[i], i))


def unit_level_trace(log: TransactionLog, roles: dict[str, str]):
    """Track every package as an individual token.

    Returns (paths, censored, underflow) with the same keys as the production
    multiset: ``(nodes tuple, product)`` and ``(entity, product)``.
    """
    queues: dict = defaultdict(deque)
    paths: Counter = Counter()
    censored: Counter = Counter()
    underflow: Counter = Counter()
    for i in same_day_order(log):
        s, b = log.entities[log.seller[i]], log.entities[log.buyer[i]]
        p = log.products[log.product[i]]
        tokens = []
        for _ in range(int(log.quantity[i])):
            if roles[s] == "manufacturer":
                tokens.append(((s,), False))
            elif queues[(s, p)]:
                tokens.append(queues[(s, p)].popleft())
            else:
                tokens.append(((s,), True))
                underflow[(s, p)] += 1
        for nodes, phantom in tokens:
            if roles[b] == "final-buyer":
                (censored if phantom else paths)[(nodes, p)] += 1
            else:
                queues[(b, p)].append((nodes + (b,), phantom))
    return dict(paths), dict(censored), dict(underflow)


def sub_path_counts(paths: dict, virtual: str | None = "*") -> Counter:
    out: Counter = Counter()
    for (nodes, _), n in paths.items():
        seq = ((virtual,) if virtual else ()) + tuple(nodes)
        for s in range(len(seq) - 2):
            a, b, c = seq[s:s + 3]
            out[(c, b, a)] += n
    return out


# -- spectra ------------------------------------------------------------------

def dense_second_modulus(M: np.ndarray) -> float:
    ev = np.linalg.eigvals(np.asarray(M, dtype=float))
    mods = np.sort(np.abs(ev))[::-1]
    return float(mods[1]) if len(mods) > 1 else 0.0


def random_absorbing_chain(rng: np.random.Generator, n: int, density: float = 0.2) -> np.ndarray:
    """Row-stochastic n x n matrix whose last state is the only absorbing one
    and reachable from every other state."""
    M = np.zeros((n, n))
    for i in range(n - 1):
        k = max(1, rng.binomial(n - 1, density))
        cols = rng.choice(n, size=k, replace=False)
        M[i, cols] = rng.random(k)
        # forward edge keeps the absorbing state reachable
        M[i, rng.integers(i + 1, n)] += rng.random() + 0.05
        M[i] /= M[i].sum()
    M[n - 1, n - 1] = 1.0
    return M
