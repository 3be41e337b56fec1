"""Order-2 transition tensors, the flexibility mixture, shipment tensors and the
second-order (meta-node) graph.

Index convention for order tensors: ``(i, j, k)`` is an order placed by ``i``
with intermediary ``j`` for goods that ``j`` sources from ``k``. Shipment
tensors run the other way: ``(i, j, k)`` is goods leaving ``i`` that pass
``j`` and end at ``k``.
"""
from __future__ import annotations

import csv
from dataclasses import dataclass, field
from typing import Iterable, Mapping

from .pathrec import VIRTUAL_SOURCE, CountTensor

Triple = tuple[str, str, str]

TWO_STEP, ONE_STEP, MIXED = "two-step", "one-step", "mixed"
END = "†"
END_NODE = (END, END)
OBSERVED, ALTERNATIVE = "observed", "alternative"


class TensorError(ValueError):
    pass


def _normalize_rows(entries: Mapping[Triple, float]) -> dict[Triple, float]:
    totals: dict[str, float] = {}
    for (i, _, _), v in entries.items():
        totals[i] = totals.get(i, 0.0) + v
    return {key: v / totals[key[0]] for key, v in entries.items() if v > 0 and totals[key[0]] > 0}


def _rows(entries: Mapping[Triple, float]) -> dict[str, dict[tuple[str, str], float]]:
    out: dict[str, dict[tuple[str, str], float]] = {}
    for (i, j, k), v in entries.items():
        out.setdefault(i, {})[(j, k)] = v
    return out


@dataclass(frozen=True)
class TransitionTensor:
    """Sparse order-direction tensor; every orderer row sums to one."""
    entries: dict[Triple, float]
    kind: str = TWO_STEP
    phi: float | Mapping[str, float] | None = None

    def __len__(self) -> int:
        return len(self.entries)

    def __getitem__(self, key: Triple) -> float:
        return self.entries.get(key, 0.0)

    def support(self) -> set[Triple]:
        return set(self.entries)

    def orderers(self) -> list[str]:
        return sorted({i for i, _, _ in self.entries})

    def row_sums(self) -> dict[str, float]:
        out: dict[str, float] = {}
        for (i, _, _), v in self.entries.items():
            out[i] = out.get(i, 0.0) + v
        return out

    def first_order(self) -> "FirstOrderMatrix":
        s: dict[tuple[str, str], float] = {}
        for (i, j, _), v in self.entries.items():
            s[(i, j)] = s.get((i, j), 0.0) + v
        return FirstOrderMatrix(s)

    def conditional(self) -> dict[tuple[str, str], dict[str, float]]:
        """Source distribution given (orderer, intermediary)."""
        groups: dict[tuple[str, str], dict[str, float]] = {}
        for (i, j, k), v in self.entries.items():
            groups.setdefault((i, j), {})[k] = v
        out = {}
        for ij, row in groups.items():
            tot = sum(row.values())
            if tot > 0:
                out[ij] = {k: v / tot for k, v in row.items()}
        return out


@dataclass(frozen=True)
class FirstOrderMatrix:
    entries: dict[tuple[str, str], float]

    def row(self, i: str) -> dict[str, float]:
        return {j: v for (a, j), v in self.entries.items() if a == i}

    def rows(self) -> dict[str, dict[str, float]]:
        out: dict[str, dict[str, float]] = {}
        for (i, j), v in self.entries.items():
            out.setdefault(i, {})[j] = v
        return out


def build_two_step(counts: CountTensor) -> TransitionTensor:
    if not counts:
        raise TensorError("empty count tensor")
    return TransitionTensor(_normalize_rows(counts.entries), TWO_STEP, 0.0)


def build_one_step(counts: CountTensor, two_step: TransitionTensor | None = None) -> TransitionTensor:
    """Tensor in which every orderer adopts its intermediaries' own sourcing mix.

    The orderer keeps its first-order choice of intermediary (``S_ij``);
    given the intermediary ``j``, the source follows ``j``'s ordering
    distribution ``S_j.``. An intermediary that places no orders itself (a
    manufacturer) keeps the orderer's observed conditional.
    """
    t2 = two_step if two_step is not None else build_two_step(counts)
    s_rows = t2.first_order().rows()
    cond = t2.conditional()
    out: dict[Triple, float] = {}
    for (i, j), s_ij in t2.first_order().entries.items():
        upstream = s_rows.get(j)
        if upstream:
            tot = sum(upstream.values())
            for k, s_jk in upstream.items():
                out[(i, j, k)] = out.get((i, j, k), 0.0) + s_ij * s_jk / tot
        else:
            for k, p in cond[(i, j)].items():
                out[(i, j, k)] = out.get((i, j, k), 0.0) + s_ij * p
    return TransitionTensor(_normalize_rows(out), ONE_STEP, 1.0)


def _phi_of(phi, i: str, default: float) -> float:
    v = phi.get(i, default) if isinstance(phi, Mapping) else phi
    if not 0.0 <= v <= 1.0:
        raise TensorError(f"flexibility for {i!r} is {v}, outside [0, 1]")
    return float(v)


def mix(two_step: TransitionTensor, one_step: TransitionTensor,
        phi: float | Mapping[str, float], default: float = 0.0) -> TransitionTensor:
    """Per-orderer convex combination ``(1 - phi_i) * two_step + phi_i * one_step``.

    ``phi`` is a scalar or a map entity -> value; entities missing from the
    map use ``default``. Exact zeros are dropped, so ``phi = 0`` returns the
    two-step entries and ``phi = 1`` the one-step entries unchanged.
    """
    for i in (phi if isinstance(phi, Mapping) else ["*"]):
        _phi_of(phi, i, default)
    out: dict[Triple, float] = {}
    for key in two_step.entries.keys() | one_step.entries.keys():
        f = _phi_of(phi, key[0], default)
        v = (1.0 - f) * two_step.entries.get(key, 0.0) + f * one_step.entries.get(key, 0.0)
        if v != 0.0:
            out[key] = v
    return TransitionTensor(dict(sorted(out.items())), MIXED, phi)


def order_volumes(counts: CountTensor) -> dict[str, float]:
    """Total order volume of each orderer, ``v_i = sum_jk A_ijk``."""
    return counts.orderer_totals()


@dataclass(frozen=True)
class ShipmentTensor:
    """Shipment probabilities; each source slice ``i`` sums to one over (j, k)."""
    entries: dict[Triple, float]
    window: float | None = None
    volumes: Mapping[str, float] | None = None

    def __getitem__(self, key: Triple) -> float:
        return self.entries.get(key, 0.0)

    def slice_sums(self) -> dict[str, float]:
        out: dict[str, float] = {}
        for (i, _, _), v in self.entries.items():
            out[i] = out.get(i, 0.0) + v
        return out


def build_shipment_tensor(T: TransitionTensor, volumes: Mapping[str, float] | None,
                          window: float | None = None) -> ShipmentTensor:
    """Turn order flow into shipment probabilities.

    ``B[(i, j, k)] = T[(k, j, i)] * v_k / sum over (k', j') of T[(k', j', i)] * v_k'``.
    ``volumes=None`` means every orderer has volume one. Sources with zero
    incoming weighted flow get no slice.
    """
    flow: dict[Triple, float] = {}
    totals: dict[str, float] = {}
    for (k, j, i), t in T.entries.items():
        v = 1.0 if volumes is None else float(volumes.get(k, 0.0))
        w = t * v
        if w > 0:
            flow[(i, j, k)] = w
            totals[i] = totals.get(i, 0.0) + w
    entries = {key: w / totals[key[0]] for key, w in sorted(flow.items())}
    return ShipmentTensor(entries, window, volumes)


# -- second-order graph ----------------------------------------------------------

Pair = tuple[str, str]


@dataclass
class SecondOrderGraph:
    """Meta-node chain in shipment direction with an absorbing end node.

    Meta-node ``(i, j)`` holds goods at ``j`` that arrived from ``i``. Final
    distributors ``w`` send the share ``exit_prob[w]`` of their goods to
    ``(w, END)``, which moves to the absorbing ``(END, END)``.
    """
    nodes: list[Pair]
    edges: dict[tuple[Pair, Pair], float]
    final: frozenset[str]
    classes: dict[tuple[Pair, Pair], str] = field(default_factory=dict)

    def index(self) -> dict[Pair, int]:
        return {n: x for x, n in enumerate(self.nodes)}

    def out_weights(self) -> dict[Pair, float]:
        out: dict[Pair, float] = {}
        for (a, _), w in self.edges.items():
            out[a] = out.get(a, 0.0) + w
        return out

    def matrix(self):
        """Row-stochastic sparse matrix (CSR) over ``self.nodes``."""
        import numpy as np
        from scipy.sparse import csr_matrix
        idx = self.index()
        rows = np.fromiter((idx[a] for a, _ in self.edges), dtype=np.int64, count=len(self.edges))
        cols = np.fromiter((idx[b] for _, b in self.edges), dtype=np.int64, count=len(self.edges))
        vals = np.fromiter(self.edges.values(), dtype=float, count=len(self.edges))
        n = len(self.nodes)
        return csr_matrix((vals, (rows, cols)), shape=(n, n))


def to_second_order(B: ShipmentTensor, final: Iterable[str],
                    exit_prob: Mapping[str, float] | None = None,
                    dangling: str = "error") -> SecondOrderGraph:
    """Build the absorbing meta-node chain of a shipment tensor.

    ``exit_prob`` gives each final distributor's probability of shipping to a
    final buyer (default 1). A meta-node ``(i, j)`` whose holder ``j`` has no
    onward shipments and is not final is dangling: an error by default, or
    sent straight to the end node with ``dangling="absorb"``.
    """
    omega = frozenset(final)
    if not omega:
        raise TensorError("the final-distributor set is empty; the chain would not absorb")
    if dangling not in ("error", "absorb"):
        raise ValueError("dangling must be 'error' or 'absorb'")
    cont: dict[Pair, dict[str, float]] = {}
    for (i, j, k), v in B.entries.items():
        if VIRTUAL_SOURCE in (i, j, k):
            continue
        cont.setdefault((i, j), {})[k] = cont.get((i, j), {}).get(k, 0.0) + v
    meta = set(cont)
    for (i, j), row in cont.items():
        meta.update((j, k) for k in row)
    edges: dict[tuple[Pair, Pair], float] = {}
    for pair in sorted(meta):
        _, j = pair
        row = cont.get(pair)
        p_exit = 0.0
        if j in omega:
            p_exit = 1.0 if exit_prob is None else float(exit_prob.get(j, 1.0))
            if not 0.0 <= p_exit <= 1.0:
                raise TensorError(f"exit probability of {j!r} is {p_exit}")
            if not row:
                p_exit = 1.0
        elif not row:
            if dangling == "error":
                raise TensorError(f"meta-node {pair[0]}|{pair[1]} has no continuation and "
                                  f"{j!r} is not a final distributor")
            p_exit = 1.0
        if row and p_exit < 1.0:
            tot = sum(row.values())
            for k, v in sorted(row.items()):
                edges[(pair, (j, k))] = (1.0 - p_exit) * v / tot
        if p_exit > 0:
            edges[(pair, (j, END))] = p_exit
    ends = sorted({b for (_, b) in edges if b[1] == END})
    for e in ends:
        edges[(e, END_NODE)] = 1.0
    edges[(END_NODE, END_NODE)] = 1.0
    nodes = sorted(meta | set(ends)) + [END_NODE]
    return SecondOrderGraph(nodes, edges, omega)


def alternative_edges(two_step: TransitionTensor, one_step: TransitionTensor
                      ) -> list[tuple[Pair, Pair, float, str]]:
    """Second-order edges ``(i, j) -> (j, k)`` in order direction, labelled
    observed (two-step support) or alternative (one-step support only).

    The weight is the one-step probability for alternative edges and the
    two-step probability for observed ones.
    """
    out = []
    for key in sorted(two_step.entries.keys() | one_step.entries.keys()):
        if VIRTUAL_SOURCE in key:
            continue
        i, j, k = key
        if key in two_step.entries:
            out.append(((i, j), (j, k), two_step.entries[key], OBSERVED))
        else:
            out.append(((i, j), (j, k), one_step.entries[key], ALTERNATIVE))
    return out


# -- files -------------------------------------------------------------------------

TENSOR_HEADER = ["i", "j", "k", "value"]
GRAPH_HEADER = ["src_pair", "dst_pair", "weight", "class"]


def write_tensor(entries: Mapping[Triple, float], dest) -> None:
    with open(dest, "w", encoding="utf-8", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(TENSOR_HEADER)
        for (i, j, k), v in sorted(entries.items()):
            w.writerow((i, j, k, repr(float(v))))


def read_tensor(src) -> dict[Triple, float]:
    with open(src, "r", encoding="utf-8", newline="") as fh:
        r = csv.reader(fh)
        if next(r, None) != TENSOR_HEADER:
            raise ValueError(f"{src}: expected header {','.join(TENSOR_HEADER)}")
        return {(a, b, c): float(v) for a, b, c, v in r}


def _pair(p: Pair) -> str:
    return f"{p[0]}|{p[1]}"


def write_graph(edges: Iterable[tuple[Pair, Pair, float, str]], dest) -> None:
    with open(dest, "w", encoding="utf-8", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(GRAPH_HEADER)
        for a, b, weight, cls in edges:
            w.writerow((_pair(a), _pair(b), repr(float(weight)), cls))


def graph_edge_list(g: SecondOrderGraph, reference: SecondOrderGraph | None = None
                    ) -> list[tuple[Pair, Pair, float, str]]:
    """Edges of ``g``; those absent from ``reference`` are labelled alternative."""
    ref = reference.edges if reference is not None else g.edges
    return [(a, b, w, OBSERVED if (a, b) in ref else ALTERNATIVE)
            for (a, b), w in sorted(g.edges.items())]
