"""Distribution path reconstruction under first-in-first-out stock accounting.

Every distributor keeps one FIFO queue per exact product code. Queue entries
carry the provenance prefix of the goods (the entities they passed through so
far) and a quantity; an outgoing shipment consumes entries from the head,
splitting the last one if needed. Shipments to final buyers close the prefixes
they consume and emit completed paths.
"""
from __future__ import annotations

import csv
import logging
import os
from collections import Counter, deque
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from typing import Iterable, Iterator, Mapping

import numpy as np

from .ingest import (DISTRIBUTOR, FINAL_BUYER, MANUFACTURER, ROLE_CODES, EntityCatalog,
                     TransactionLog, years_of)

logger = logging.getLogger(__name__)

_MANUF, _DIST, _FINAL = ROLE_CODES[MANUFACTURER], ROLE_CODES[DISTRIBUTOR], ROLE_CODES[FINAL_BUYER]

# marks the (unknown) origin of goods leaving a manufacturer in order-2 statistics
VIRTUAL_SOURCE = "*"

PathKey = tuple[tuple[str, ...], str]   # (nodes, product code)


class ReconstructionError(ValueError):
    pass


@dataclass(frozen=True)
class DistributionPath:
    nodes: tuple[str, ...]
    product: str
    count: int

    @property
    def hops(self) -> int:
        return len(self.nodes) - 1


@dataclass
class PathMultiset:
    """Completed distribution paths with package counts.

    ``paths`` holds manufacturer-rooted paths. ``censored`` holds paths whose
    goods were sourced from a phantom entry (stock shipped before any recorded
    ship-in), rooted at the distributor where the underflow happened.
    """
    paths: dict[PathKey, int] = field(default_factory=dict)
    window: tuple[int, int] | None = None
    censored: dict[PathKey, int] = field(default_factory=dict)
    underflow: dict[tuple[str, str], int] = field(default_factory=dict)

    def __iter__(self) -> Iterator[DistributionPath]:
        for (nodes, product), n in sorted(self.paths.items()):
            yield DistributionPath(nodes, product, n)

    def __len__(self) -> int:
        return len(self.paths)

    @property
    def total(self) -> int:
        return sum(self.paths.values())

    @property
    def censored_total(self) -> int:
        return sum(self.censored.values())

    def products(self) -> set[str]:
        return {p for _, p in self.paths} | {p for _, p in self.censored}

    def restrict(self, products: Iterable[str]) -> "PathMultiset":
        keep = set(products)
        return PathMultiset({k: v for k, v in self.paths.items() if k[1] in keep}, self.window,
                            {k: v for k, v in self.censored.items() if k[1] in keep},
                            {k: v for k, v in self.underflow.items() if k[1] in keep})

    def __add__(self, other: "PathMultiset") -> "PathMultiset":
        out = PathMultiset(dict(self.paths), self.window, dict(self.censored), dict(self.underflow))
        for src, dst in ((other.paths, out.paths), (other.censored, out.censored),
                         (other.underflow, out.underflow)):
            for k, v in src.items():
                dst[k] = dst.get(k, 0) + v
        if self.window and other.window:
            out.window = (min(self.window[0], other.window[0]), max(self.window[1], other.window[1]))
        return out


# -- processing order ---------------------------------------------------------

def processing_order(log: TransactionLog) -> np.ndarray:
    """Permutation in which transactions are replayed.

    Days are replayed in order. Within a day, the (entity, product) queues
    and the shipments between them form a directed graph; each queue gets
    the length of the longest chain of same-day hand-offs leading into it,
    counted over strongly connected components so that a same-day cycle
    (A ships to B and B ships to A) shares one level. A transaction takes
    the level of the queue it ships out of, so a queue is filled before it
    is drawn from wherever that is possible. Ties keep input order.
    """
    n = len(log)
    if n == 0:
        return np.zeros(0, dtype=np.int64)
    n_prod = max(len(log.products), 1)
    n_keys = max(len(log.entities), 1) * n_prod
    day0 = log.day.astype(np.int64) - int(log.day.min())
    s_key = day0 * n_keys + log.seller.astype(np.int64) * n_prod + log.product
    b_key = day0 * n_keys + log.buyer.astype(np.int64) * n_prod + log.product
    # queues that both receive and ship on the same day are the only ones
    # whose level can be positive or that can pass a level on
    hot = np.intersect1d(s_key, b_key)
    level = np.zeros(n, dtype=np.int64)
    if len(hot):
        b_hot = np.isin(b_key, hot)
        src = s_key[b_hot]
        dst = np.searchsorted(hot, b_key[b_hot])
        src_pos = np.searchsorted(hot, src)
        src_pos = np.minimum(src_pos, len(hot) - 1)
        src_is_hot = hot[src_pos] == src
        key_level = _longest_chain(len(hot), src_pos, dst, src_is_hot)
        s_hot = np.isin(s_key, hot)
        level[s_hot] = key_level[np.searchsorted(hot, s_key[s_hot])]
    return np.lexsort((np.arange(n), level, log.day))


def _longest_chain(n: int, src: np.ndarray, dst: np.ndarray, src_is_hot: np.ndarray) -> np.ndarray:
    """Longest-path depth of every node in the condensation of a graph.

    Edges run ``src -> dst``; edges whose source is not a node (``src_is_hot``
    false) only lift their target to depth 1.
    """
    from scipy.sparse import coo_matrix
    from scipy.sparse.csgraph import connected_components

    inner_src, inner_dst = src[src_is_hot], dst[src_is_hot]
    graph = coo_matrix((np.ones(len(inner_src), dtype=np.int8), (inner_src, inner_dst)),
                       shape=(n, n)).tocsr()
    _, comp = connected_components(graph, directed=True, connection="strong")
    n_comp = int(comp.max()) + 1 if n else 0
    depth = np.zeros(n_comp, dtype=np.int64)
    np.maximum.at(depth, comp[dst[~src_is_hot]], 1)
    cs, cd = comp[inner_src], comp[inner_dst]
    across = cs != cd
    cs, cd = cs[across], cd[across]
    # the condensation is acyclic, so relaxation settles within n_comp rounds
    for _ in range(n_comp + 1):
        new = depth.copy()
        np.maximum.at(new, cd, depth[cs] + 1)
        if np.array_equal(new, depth):
            break
        depth = new
    return depth[comp]


# -- reconstruction -----------------------------------------------------------

class _PrefixTable:
    """Interned provenance prefixes: id -> (parent id, node code)."""

    def __init__(self, n_entities: int):
        self.n = n_entities
        self.parent: list[int] = []
        self.node: list[int] = []
        self.phantom: list[bool] = []
        self.child: dict[int, int] = {}
        self.root: dict[int, int] = {}
        self.phantom_root: dict[int, int] = {}

    def _new(self, parent: int, node: int, phantom: bool) -> int:
        self.parent.append(parent)
        self.node.append(node)
        self.phantom.append(phantom)
        return len(self.node) - 1

    def root_of(self, node: int) -> int:
        pid = self.root.get(node)
        if pid is None:
            pid = self.root[node] = self._new(-1, node, False)
        return pid

    def phantom_root_of(self, node: int) -> int:
        pid = self.phantom_root.get(node)
        if pid is None:
            pid = self.phantom_root[node] = self._new(-1, node, True)
        return pid

    def nodes(self, pid: int) -> list[int]:
        out = []
        while pid >= 0:
            out.append(self.node[pid])
            pid = self.parent[pid]
        out.reverse()
        return out

    def is_phantom(self, pid: int) -> bool:
        while self.parent[pid] >= 0:
            pid = self.parent[pid]
        return self.phantom[pid]


def _check_roles(log: TransactionLog, roles: np.ndarray) -> None:
    bad = roles[log.buyer] == _MANUF
    if bad.any():
        i = int(np.flatnonzero(bad)[0])
        raise ReconstructionError(f"manufacturer {log.entities[log.buyer[i]]!r} receives a shipment")
    bad = roles[log.seller] == _FINAL
    if bad.any():
        i = int(np.flatnonzero(bad)[0])
        raise ReconstructionError(f"final buyer {log.entities[log.seller[i]]!r} ships goods")


def _replay(log: TransactionLog, roles: np.ndarray, period: np.ndarray | None,
            chunk: int = 1 << 20):
    """Core FIFO loop. Returns (delivered counter, prefix table, underflow counter).

    Delivered keys are ``(period, prefix id, product code)``.
    """
    n_prod = max(len(log.products), 1)
    prefixes = _PrefixTable(len(log.entities))
    child = prefixes.child
    n_ent = len(log.entities)
    queues: dict[int, deque] = {}
    delivered: Counter = Counter()
    underflow: Counter = Counter()
    roles_l = roles.tolist()
    order = processing_order(log)

    for lo in range(0, len(order), chunk):
        idx = order[lo:lo + chunk]
        sellers = log.seller[idx].tolist()
        buyers = log.buyer[idx].tolist()
        products = log.product[idx].tolist()
        quantities = log.quantity[idx].tolist()
        periods = period[idx].tolist() if period is not None else [0] * len(idx)
        for s, b, p, q, y in zip(sellers, buyers, products, quantities, periods):
            if roles_l[s] == _MANUF:
                pieces = ((prefixes.root_of(s), q),)
            else:
                dq = queues.get(s * n_prod + p)
                need = q
                pieces = []
                while need and dq:
                    head = dq[0]
                    if head[1] <= need:
                        need -= head[1]
                        pieces.append((head[0], head[1]))
                        dq.popleft()
                    else:
                        head[1] -= need
                        pieces.append((head[0], need))
                        need = 0
                if need:
                    pieces.append((prefixes.phantom_root_of(s), need))
                    underflow[(s, p)] += need
            if roles_l[b] == _FINAL:
                for pid, n in pieces:
                    delivered[(y, pid, p)] += n
            else:
                key = b * n_prod + p
                dq = queues.get(key)
                if dq is None:
                    dq = queues[key] = deque()
                for pid, n in pieces:
                    ck = pid * n_ent + b
                    cid = child.get(ck)
                    if cid is None:
                        cid = child[ck] = prefixes._new(pid, b, False)
                    if dq and dq[-1][0] == cid:
                        dq[-1][1] += n
                    else:
                        dq.append([cid, n])
    return delivered, prefixes, underflow


def _assemble(log, delivered, prefixes, underflow, windows: Mapping[int, tuple[int, int]]
              ) -> dict[int, PathMultiset]:
    out = {y: PathMultiset(window=w) for y, w in windows.items()}
    ents, prods = log.entities, log.products
    cache: dict[int, tuple[tuple[str, ...], bool]] = {}
    for (y, pid, p), n in delivered.items():
        got = cache.get(pid)
        if got is None:
            nodes = tuple(ents[k] for k in prefixes.nodes(pid))
            got = cache[pid] = (nodes, prefixes.is_phantom(pid))
        nodes, phantom = got
        target = out[y].censored if phantom else out[y].paths
        key = (nodes, prods[p])
        target[key] = target.get(key, 0) + n
    first = next(iter(out.values()), None)
    if first is not None:
        for (s, p), n in underflow.items():
            first.underflow[(ents[s], prods[p])] = n
    return out


def _window(log: TransactionLog) -> tuple[int, int] | None:
    return (int(log.day.min()), int(log.day.max())) if len(log) else None


def reconstruct_paths(log: TransactionLog, catalog: EntityCatalog,
                      classes=None, workers: int = 1) -> PathMultiset:
    """Replay a date-sorted log and return every completed distribution path.

    ``classes`` is accepted for interface symmetry; queues are always keyed
    by exact product code. With ``workers > 1`` product codes are replayed in
    separate processes (their queues are disjoint) and merged.
    """
    if len(log) == 0:
        return PathMultiset()
    if np.any(np.diff(log.day) < 0):
        raise ReconstructionError("transactions must be sorted by date")
    roles = log.role_codes(catalog)
    _check_roles(log, roles)
    if workers > 1 and len(log.products) > 1:
        parts = [log.take(log.product == p) for p in range(len(log.products))]
        parts = [p for p in parts if len(p)]
        with ProcessPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(_reconstruct_one, parts, [catalog] * len(parts)))
        merged = PathMultiset(window=_window(log))
        for r in results:
            merged = merged + r
        merged.window = _window(log)
        return _sorted(merged)
    delivered, prefixes, underflow = _replay(log, roles, None)
    return _sorted(_assemble(log, delivered, prefixes, underflow, {0: _window(log)})[0])


def _reconstruct_one(log: TransactionLog, catalog: EntityCatalog) -> PathMultiset:
    return reconstruct_paths(log, catalog, workers=1)


def _sorted(pm: PathMultiset) -> PathMultiset:
    pm.paths = dict(sorted(pm.paths.items()))
    pm.censored = dict(sorted(pm.censored.items()))
    pm.underflow = dict(sorted(pm.underflow.items()))
    return pm


def reconstruct_paths_by_year(log: TransactionLog, catalog: EntityCatalog) -> dict[int, PathMultiset]:
    """Single replay over the whole log; each path is attributed to the
    calendar year in which its goods reached a final buyer."""
    if len(log) == 0:
        return {}
    roles = log.role_codes(catalog)
    _check_roles(log, roles)
    years = years_of(log.day)
    windows = {}
    for y in np.unique(years).tolist():
        sel = log.day[years == y]
        windows[y] = (int(sel.min()), int(sel.max()))
    delivered, prefixes, underflow = _replay(log, roles, years)
    out = _assemble(log, delivered, prefixes, underflow, windows)
    return {y: _sorted(pm) for y, pm in sorted(out.items())}


def final_deliveries(log: TransactionLog, catalog: EntityCatalog) -> int:
    roles = log.role_codes(catalog)
    return int(log.quantity[roles[log.buyer] == _FINAL].sum())


# -- statistics ---------------------------------------------------------------

@dataclass
class CountTensor:
    """Order-2 path counts A[(i, j, k)]: orders placed by ``i`` to ``k`` via ``j``.

    ``margin[(i, j)]`` counts single hops (``i`` receiving from ``j``).
    ``virtual_rows`` lists orderers whose only order-2 evidence is a direct
    purchase from a manufacturer (their source is :data:`VIRTUAL_SOURCE`).
    """
    entries: dict[tuple[str, str, str], float] = field(default_factory=dict)
    margin: dict[tuple[str, str], float] = field(default_factory=dict)
    virtual_rows: set[str] = field(default_factory=set)

    def __bool__(self) -> bool:
        return bool(self.entries)

    def orderer_totals(self) -> dict[str, float]:
        out: dict[str, float] = {}
        for (i, _, _), v in self.entries.items():
            out[i] = out.get(i, 0.0) + v
        return out

    def __add__(self, other: "CountTensor") -> "CountTensor":
        out = CountTensor(dict(self.entries), dict(self.margin), set(self.virtual_rows))
        for k, v in other.entries.items():
            out.entries[k] = out.entries.get(k, 0.0) + v
        for k, v in other.margin.items():
            out.margin[k] = out.margin.get(k, 0.0) + v
        out.virtual_rows = _virtual_rows(out.entries)
        return out


def _virtual_rows(entries) -> set[str]:
    real = {i for (i, _, k) in entries if k != VIRTUAL_SOURCE}
    return {i for (i, _, k) in entries if k == VIRTUAL_SOURCE} - real


def path_counts(paths: PathMultiset, max_order: int = 2, *, products: Iterable[str] | None = None,
                include_censored: bool = True, virtual_source: bool = True) -> CountTensor:
    """Sub-path counts of length-2 windows over all paths.

    A window ``(k, j, i)`` in shipment direction adds to ``A[(i, j, k)]``,
    whether it is a whole path or part of a longer one. Manufacturer-rooted
    paths are prefixed with :data:`VIRTUAL_SOURCE` so that orders placed
    directly with a manufacturer get an order-2 row too.
    """
    if max_order != 2:
        raise ValueError("only order-2 statistics are supported")
    keep = set(products) if products is not None else None
    entries: Counter = Counter()
    margin: Counter = Counter()
    sources = [(paths.paths, virtual_source)]
    if include_censored:
        sources.append((paths.censored, False))
    for table, prefix in sources:
        for (nodes, product), n in table.items():
            if keep is not None and product not in keep:
                continue
            seq = ((VIRTUAL_SOURCE,) + nodes) if prefix else nodes
            for a, b, c in zip(seq, seq[1:], seq[2:]):
                entries[(c, b, a)] += n
            for a, b in zip(nodes, nodes[1:]):
                margin[(b, a)] += n
    entries_f = {k: float(v) for k, v in sorted(entries.items())}
    return CountTensor(entries_f, {k: float(v) for k, v in sorted(margin.items())},
                       _virtual_rows(entries_f))


def distributor_positions(paths: PathMultiset) -> dict[str, float]:
    """Count-weighted mean 1-based position of each distributor on its paths
    (the manufacturer at the head of a path is not counted)."""
    if not paths.paths:
        raise ValueError("empty path multiset")
    num: dict[str, float] = {}
    den: dict[str, float] = {}
    for (nodes, _), n in paths.paths.items():
        for pos, d in enumerate(nodes[1:], start=1):
            num[d] = num.get(d, 0.0) + pos * n
            den[d] = den.get(d, 0.0) + n
    return {d: num[d] / den[d] for d in sorted(num)}


def exit_fractions(paths: PathMultiset) -> dict[str, float]:
    """Share of the volume passing through each entity that leaves the
    distribution system there (shipped to final buyers)."""
    through: dict[str, float] = {}
    ends: dict[str, float] = {}
    for table in (paths.paths, paths.censored):
        for (nodes, _), n in table.items():
            for e in nodes:
                through[e] = through.get(e, 0.0) + n
            ends[nodes[-1]] = ends.get(nodes[-1], 0.0) + n
    return {e: ends[e] / through[e] for e in sorted(ends)}


def final_distributors(paths: PathMultiset) -> set[str]:
    return {nodes[-1] for (nodes, _) in list(paths.paths) + list(paths.censored)}


# -- files --------------------------------------------------------------------

PATH_HEADER = ["path", "product_code", "count"]
UNDERFLOW_HEADER = ["entity_id", "product_code", "phantom_units"]


def write_paths(table: Mapping[PathKey, int], dest) -> None:
    with open(dest, "w", encoding="utf-8", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(PATH_HEADER)
        for (nodes, product), n in sorted(table.items()):
            w.writerow((">".join(nodes), product, n))


def read_paths(src) -> dict[PathKey, int]:
    out: dict[PathKey, int] = {}
    with open(src, "r", encoding="utf-8", newline="") as fh:
        r = csv.reader(fh)
        header = next(r, None)
        if header != PATH_HEADER:
            raise ValueError(f"{src}: expected header {','.join(PATH_HEADER)}")
        for row in r:
            if row:
                key = (tuple(row[0].split(">")), row[1])
                out[key] = out.get(key, 0) + int(row[2])
    return out


def write_underflow(pm: PathMultiset, dest) -> None:
    with open(dest, "w", encoding="utf-8", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(UNDERFLOW_HEADER)
        for (e, p), n in sorted(pm.underflow.items()):
            w.writerow((e, p, n))


def read_underflow(src) -> dict[tuple[str, str], int]:
    with open(src, "r", encoding="utf-8", newline="") as fh:
        r = csv.reader(fh)
        next(r, None)
        return {(row[0], row[1]): int(row[2]) for row in r if row}


def save_multiset(pm: PathMultiset, directory, stem: str = "paths") -> list[str]:
    os.makedirs(directory, exist_ok=True)
    files = [os.path.join(directory, f"{stem}.csv"), os.path.join(directory, f"{stem}_censored.csv"),
             os.path.join(directory, f"{stem}_underflow.csv")]
    write_paths(pm.paths, files[0])
    write_paths(pm.censored, files[1])
    write_underflow(pm, files[2])
    return files


def load_multiset(directory, stem: str = "paths") -> PathMultiset:
    pm = PathMultiset(read_paths(os.path.join(directory, f"{stem}.csv")))
    cens = os.path.join(directory, f"{stem}_censored.csv")
    if os.path.exists(cens):
        pm.censored = read_paths(cens)
    under = os.path.join(directory, f"{stem}_underflow.csv")
    if os.path.exists(under):
        pm.underflow = read_underflow(under)
    return pm
